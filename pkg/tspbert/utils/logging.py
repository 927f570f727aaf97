import os
import logging
from logging.handlers import RotatingFileHandler

EVENTS_LEVEL_NUM = 38
DEFAULT_LOG_BACKUP_COUNT = 10


def setup_events_logger(full_path, events_retention_size):
    """Rotating `events.log` under `full_path` at the custom EVENT level."""
    logging.addLevelName(EVENTS_LEVEL_NUM, "EVENT")

    logger = logging.getLogger("tspbert.event")
    logger.setLevel(EVENTS_LEVEL_NUM)
    logger.propagate = False

    def event(self, message, *args, **kws):
        if self.isEnabledFor(EVENTS_LEVEL_NUM):
            self._log(EVENTS_LEVEL_NUM, message, args, **kws)

    logging.Logger.event = event

    formatter = logging.Formatter(
        "%(asctime)s | %(levelname)s | %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )

    os.makedirs(full_path, exist_ok=True)
    path = os.path.join(full_path, "events.log")
    for handler in list(logger.handlers):
        if getattr(handler, "baseFilename", None) == os.path.abspath(path):
            return logger
    file_handler = RotatingFileHandler(
        path,
        maxBytes=int(events_retention_size),
        backupCount=DEFAULT_LOG_BACKUP_COUNT,
    )
    file_handler.setFormatter(formatter)
    file_handler.setLevel(EVENTS_LEVEL_NUM)
    logger.addHandler(file_handler)

    return logger


def log_block_events(logger, schedule):
    """One event per scheduled node: layer, block, node, first and last cycle."""
    if logger is None:
        return
    by_node = {}
    for inst in schedule.instructions:
        by_node.setdefault(inst.node, (inst.layer, inst.block))
    for node, (start, end) in sorted(schedule.node_windows.items(), key=lambda kv: (kv[1][0], kv[0])):
        layer, block = by_node.get(node, (0, ""))
        logger.event(f"layer={layer} | block={block} | node={node} | start={start} | end={end}")
