import asyncio
import logging
import signal
import sys

import uvloop

from . import cfg
from .gateway import StartupError, serve

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)-5.5s [%(name)s] %(message)s"


def setup_logging(level: str = cfg.log_level) -> None:
    logging.basicConfig(level=level, format=LOG_FORMAT)
    logging.getLogger("apscheduler").setLevel(logging.WARNING)
    logging.getLogger("aiohttp.access").setLevel(logging.WARNING)


async def _serve_until_signalled(config: cfg.ServerConfig) -> None:
    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for signum in (signal.SIGTERM, signal.SIGINT):
        loop.add_signal_handler(signum, stop.set)
    await serve(config, stop)


def run(config: cfg.ServerConfig) -> None:
    uvloop.install()
    asyncio.run(_serve_until_signalled(config))


if __name__ == "__main__":
    setup_logging()
    try:
        run(cfg.load_config())
    except (StartupError, cfg.ConfigError) as e:
        logger.error(str(e))
        sys.exit(4)
