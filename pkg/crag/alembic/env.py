import sys
from logging.config import fileConfig
from os.path import abspath, dirname

from sqlalchemy import engine_from_config, pool

from alembic import context

# Handle path to allow project imports into alembic
sys.path.insert(0, dirname(dirname(dirname(abspath(__file__)))))

from crag import cfg
from crag import governance  # noqa: F401  registers the ledger tables
from crag.utils import Base

config = context.config

if config.config_file_name is not None:
    fileConfig(config.config_file_name)

target_metadata = Base.metadata


def _db_url() -> str:
    return cfg.load_config().db_url


def run_migrations_offline() -> None:
    """Emit SQL for the governance ledger without a live database"""
    context.configure(
        url=_db_url(),
        target_metadata=target_metadata,
        literal_binds=True,
        dialect_opts={"paramstyle": "named"},
        render_as_batch=True,
    )

    with context.begin_transaction():
        context.run_migrations()


def run_migrations_online() -> None:
    config_ = config.get_section(config.config_ini_section)
    config_["sqlalchemy.url"] = _db_url()
    connectable = engine_from_config(
        config_,
        prefix="sqlalchemy.",
        poolclass=pool.NullPool,
        future=True,
    )

    with connectable.connect() as connection:
        context.configure(
            connection=connection,
            target_metadata=target_metadata,
            render_as_batch=True,
        )
        with context.begin_transaction():
            context.run_migrations()

    connectable.dispose()


if context.is_offline_mode():
    run_migrations_offline()
else:
    run_migrations_online()
