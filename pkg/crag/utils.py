import asyncio
import concurrent.futures
import contextlib
import datetime as dt
import functools
import json
import logging

from sqlalchemy import create_engine
from sqlalchemy.orm import declarative_base, sessionmaker
from sqlalchemy.pool import StaticPool

from . import cfg

Base = declarative_base()

_executor = concurrent.futures.ThreadPoolExecutor(thread_name_prefix="crag")


def make_session_factory(db_url: str) -> sessionmaker:
    """Session factory for the governance ledger

    In-memory SQLite shares one connection across threads so every
    session sees the same database"""
    engine_kwargs = {"pool_pre_ping": True}
    if db_url.startswith("sqlite"):
        engine_kwargs["connect_args"] = {"check_same_thread": False}
        if ":memory:" in db_url or db_url == "sqlite://":
            engine_kwargs["poolclass"] = StaticPool
    db_engine = create_engine(db_url, future=True, **engine_kwargs)
    return sessionmaker(db_engine, **cfg.db_session_kwargs)


def create_tables(session_factory: sessionmaker) -> None:
    Base.metadata.create_all(session_factory.kw["bind"])


@contextlib.contextmanager
def operation_timer(op_name, logger=logging.getLogger("main/" + __name__)):
    start_time = dt.datetime.now()
    logger.info("{name} started".format(name=op_name))
    yield lambda t: (t - start_time).total_seconds()
    end_time = dt.datetime.now()
    time_delta = end_time - start_time
    minutes = time_delta.seconds // 60
    seconds = time_delta.seconds % 60 + time_delta.microseconds / 1e6
    logger.info(
        "{name} finished in {mins} minutes and {secs:.3f} seconds".format(
            name=op_name, mins=minutes, secs=seconds
        )
    )


async def run_in_thread_pool(func, *args, **kwargs):
    """Run blocking store, crypto and ledger work off the event loop"""
    loop = asyncio.get_running_loop()
    return await loop.run_in_executor(
        _executor, functools.partial(func, *args, **kwargs)
    )


def canonical_json(obj) -> bytes:
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False
    ).encode("utf-8")
