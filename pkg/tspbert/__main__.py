import sys

from tspbert.cli import main

sys.exit(main())
