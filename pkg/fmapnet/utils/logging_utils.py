import logging

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def configure_logging(log_file="fmapnet.log", level=logging.INFO):
    """
    Configure root logging for command-line runs: one file handler, one stream handler.

    Library modules only create named loggers; this is called once by the CLI.

    Args:
        log_file (str | None): Path of the log file, or None for console only
        level (int): Logging level
    """
    handlers = [logging.StreamHandler()]
    if log_file:
        handlers.insert(0, logging.FileHandler(log_file))
    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers, force=True)
    return logging.getLogger("fmapnet")
