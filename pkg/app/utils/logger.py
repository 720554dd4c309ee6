import logging
import logging.config
import os

from app.core.config import settings


def setup_logging(config_path=None, log_dir=None):
    config_path = str(config_path or settings.log_config)
    log_dir = str(log_dir or settings.log_dir)
    if not os.path.exists(log_dir):
        os.makedirs(log_dir)

    if os.path.exists(config_path):
        logging.config.fileConfig(
            config_path,
            defaults={"log_dir": log_dir.replace("\\", "/"), "log_level": settings.log_level},
            disable_existing_loggers=False,
        )
    else:
        logging.basicConfig(level=settings.log_level, format="%(levelname)-5.5s [%(name)s] %(message)s")

    # Get and return the package logger
    return logging.getLogger("refine")

logger = setup_logging()
