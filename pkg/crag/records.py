# Community data contributed to the store

import enum
import re

import attr

from .crypto import Digest, digest

# Record ids are written fixed width into the store file
RECORD_ID_WIDTH = 64
_identifier = re.compile(r"^[A-Za-z0-9_.:@/-]{1,64}$")


class Visibility(enum.Enum):
    PRIVATE = "private"
    OPEN = "open"


def valid_identifier(value: str) -> bool:
    return isinstance(value, str) and bool(_identifier.match(value))


def _identifier_field(instance, attribute, value):
    if not valid_identifier(value):
        raise ValueError(
            "{} must be 1-64 characters of [A-Za-z0-9_.:@/-]".format(attribute.name)
        )


@attr.s(frozen=True, slots=True)
class CommunityRecord:
    record_id: str = attr.ib(validator=_identifier_field)
    text: str = attr.ib(repr=False)
    visibility: Visibility = attr.ib(converter=Visibility)
    contributor: str = attr.ib(validator=_identifier_field)


def record_digest(record_id: str) -> Digest:
    """How a record id appears in the audit log"""
    return digest(record_id.encode("utf-8"))
