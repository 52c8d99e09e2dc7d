import abc
import json
from os import getenv as _getenv
from pathlib import Path
from typing import Callable, Mapping, Optional

import attr

# Governance ledger session parameters
db_session_kwargs = {"expire_on_commit": False}

log_level = (_getenv("CRAG_LOG_LEVEL") or "INFO").upper()

# Config file named by the environment; CLI --config takes precedence
config_path = _getenv("CRAG_CONFIG")


class defaults(abc.ABC):
    host = "127.0.0.1"
    port = 8400
    store_path = "state/store.cvs"
    audit_path = "state/audit.jsonl"
    registry_path = "state/registry.json"
    rules_path = None
    policy_path = "state/policy.json"
    db_url = "sqlite:///state/governance.db"
    clients_path = "state/clients.json"
    device_secret_path = "state/device.secret"
    root_public = None
    root_secret_path = "state/platform-root.secret"
    k = 4
    provenance = True
    dim = 64
    artifact_name = "crag-enclave"
    artifact_version = None
    drift_interval_minutes = 0
    shutdown_timeout = 10.0


@attr.s(auto_exc=True)
class ConfigError(Exception):
    field: str = attr.ib()
    reason: str = attr.ib()

    def __str__(self) -> str:
        return "Config field {}: {}".format(self.field, self.reason)


def _positive(instance, attribute, value):
    if value < 1:
        raise ConfigError(attribute.name, "must be at least 1, got {}".format(value))


def _non_negative(instance, attribute, value):
    if value < 0:
        raise ConfigError(attribute.name, "must not be negative, got {}".format(value))


def _port(instance, attribute, value):
    if not 0 <= value <= 65535:
        raise ConfigError(attribute.name, "{} is not a TCP port".format(value))


def _root_public(instance, attribute, value):
    if value is None:
        return
    try:
        if len(bytes.fromhex(value)) != 32:
            raise ValueError
    except ValueError:
        raise ConfigError(attribute.name, "must be 32 bytes of hex")


@attr.s(frozen=True, slots=True)
class ServerConfig:
    host: str = attr.ib(default=defaults.host)
    port: int = attr.ib(default=defaults.port, validator=_port)
    store_path: str = attr.ib(default=defaults.store_path)
    audit_path: str = attr.ib(default=defaults.audit_path)
    registry_path: str = attr.ib(default=defaults.registry_path)
    rules_path: Optional[str] = attr.ib(default=defaults.rules_path)
    policy_path: str = attr.ib(default=defaults.policy_path)
    db_url: str = attr.ib(default=defaults.db_url)
    clients_path: str = attr.ib(default=defaults.clients_path)
    device_secret_path: str = attr.ib(default=defaults.device_secret_path)
    root_public: Optional[str] = attr.ib(
        default=defaults.root_public, validator=_root_public
    )
    root_secret_path: Optional[str] = attr.ib(default=defaults.root_secret_path)
    k: int = attr.ib(default=defaults.k, validator=_positive)
    provenance: bool = attr.ib(default=defaults.provenance)
    dim: int = attr.ib(default=defaults.dim, validator=_positive)
    artifact_name: str = attr.ib(default=defaults.artifact_name)
    artifact_version: Optional[str] = attr.ib(default=defaults.artifact_version)
    drift_interval_minutes: float = attr.ib(
        default=defaults.drift_interval_minutes, validator=_non_negative
    )
    shutdown_timeout: float = attr.ib(
        default=defaults.shutdown_timeout, validator=_non_negative
    )

    def measured_bytes(self, generator_id: str) -> bytes:
        """Configuration that feeds the enclave measurement"""
        return json.dumps(
            {
                "dim": self.dim,
                "generator_id": generator_id,
                "k": self.k,
                "provenance": self.provenance,
            },
            sort_keys=True,
            separators=(",", ":"),
        ).encode("utf-8")


def _as_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValueError("not a boolean: {!r}".format(value))


def _optional_str(value) -> Optional[str]:
    return None if value in (None, "") else str(value)


_CONVERTERS: Mapping[str, Callable] = {
    "host": str,
    "port": int,
    "store_path": str,
    "audit_path": str,
    "registry_path": str,
    "rules_path": _optional_str,
    "policy_path": str,
    "db_url": str,
    "clients_path": str,
    "device_secret_path": str,
    "root_public": _optional_str,
    "root_secret_path": _optional_str,
    "k": int,
    "provenance": _as_bool,
    "dim": int,
    "artifact_name": str,
    "artifact_version": _optional_str,
    "drift_interval_minutes": float,
    "shutdown_timeout": float,
}

ENV_NAMES = {
    "host": "CRAG_HOST",
    "port": "CRAG_PORT",
    "store_path": "CRAG_STORE",
    "audit_path": "CRAG_AUDIT_LOG",
    "registry_path": "CRAG_REGISTRY",
    "rules_path": "CRAG_RULES",
    "policy_path": "CRAG_POLICY",
    "db_url": "CRAG_DATABASE_URL",
    "clients_path": "CRAG_CLIENTS",
    "device_secret_path": "CRAG_DEVICE_SECRET",
    "root_public": "CRAG_ROOT_PUBLIC",
    "root_secret_path": "CRAG_ROOT_SECRET",
    "k": "CRAG_K",
    "provenance": "CRAG_PROVENANCE",
    "dim": "CRAG_DIM",
    "artifact_name": "CRAG_ARTIFACT_NAME",
    "artifact_version": "CRAG_ARTIFACT_VERSION",
    "drift_interval_minutes": "CRAG_DRIFT_INTERVAL",
    "shutdown_timeout": "CRAG_SHUTDOWN_TIMEOUT",
}


def load_config(
    path: Optional[str] = None, environ: Optional[Mapping[str, str]] = None
) -> ServerConfig:
    """Defaults, then the JSON config file, then CRAG_* environment variables"""
    getenv = environ.get if environ is not None else _getenv
    path = path or getenv("CRAG_CONFIG")
    raw = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as e:
            raise ConfigError("CRAG_CONFIG", "cannot read {}: {}".format(path, e))
        if not isinstance(raw, dict):
            raise ConfigError("CRAG_CONFIG", "{} must hold a JSON object".format(path))
        unknown = set(raw) - set(_CONVERTERS)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown configuration field")
    for field, env_name in ENV_NAMES.items():
        value = getenv(env_name)
        if value is not None:
            raw[field] = value
    values = {}
    for field, value in raw.items():
        try:
            values[field] = _CONVERTERS[field](value)
        except (TypeError, ValueError) as e:
            raise ConfigError(field, str(e))
    return ServerConfig(**values)
