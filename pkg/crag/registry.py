# Registry of approved artifact measurements and the deployment drift check
#
# Persisted as JSON followed by a "sha256:<hex>" footer line over the JSON bytes.

import enum
import json
import logging
import os
import threading
from pathlib import Path
from typing import List, Optional, Union

import attr

from .audit import AuditLog, EventKind
from .crypto import Digest, KeyFormatError, digest
from .enclave import AttestationReport, Measurement, verify_report
from .records import valid_identifier

logger = logging.getLogger(__name__)

FOOTER_PREFIX = "sha256:"


class RegistryError(Exception):
    pass


class DuplicateArtifact(RegistryError):
    pass


class MeasurementImmutable(DuplicateArtifact):
    pass


class DriftStatus(enum.Enum):
    MATCH = "match"
    DRIFT = "drift"
    UNKNOWN_ARTIFACT = "unknown-artifact"


@attr.s(frozen=True, slots=True)
class ArtifactRecord:
    name: str = attr.ib()
    version: str = attr.ib()
    measurement: Measurement = attr.ib()
    eval_attestation_digest: Optional[Digest] = attr.ib()
    registered_seq: int = attr.ib()

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "version": self.version,
            "measurement": self.measurement.hex(),
            "eval_attestation_digest": (
                self.eval_attestation_digest.hex()
                if self.eval_attestation_digest is not None
                else None
            ),
            "registered_seq": self.registered_seq,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ArtifactRecord":
        eval_digest = data.get("eval_attestation_digest")
        return cls(
            name=data["name"],
            version=data["version"],
            measurement=Measurement(bytes.fromhex(data["measurement"])),
            eval_attestation_digest=(
                Digest.from_hex(eval_digest) if eval_digest is not None else None
            ),
            registered_seq=int(data["registered_seq"]),
        )


@attr.s(frozen=True, slots=True)
class DriftVerdict:
    status: DriftStatus = attr.ib()
    expected: Optional[Measurement] = attr.ib()
    observed: Measurement = attr.ib()
    # Signature validity is reported beside the status, never folded into it
    report_verified: bool = attr.ib()

    @property
    def ok(self) -> bool:
        return self.status is DriftStatus.MATCH and self.report_verified


def artifact_digest(name: str, version: str) -> Digest:
    return digest("{}@{}".format(name, version).encode("utf-8"))


class ArtifactRegistry:
    def __init__(self, path: Union[str, Path], audit: Optional[AuditLog] = None):
        self._path = Path(path)
        self._audit = audit
        self._lock = threading.Lock()
        self._records: List[ArtifactRecord] = []
        if self._path.exists():
            self._records = self._load()
        logger.info(
            "Registry {} holds {} artifacts".format(self._path, len(self._records))
        )

    def _load(self) -> List[ArtifactRecord]:
        text = self._path.read_text(encoding="utf-8")
        body, _, footer = text.rstrip("\n").rpartition("\n")
        if not footer.startswith(FOOTER_PREFIX):
            raise RegistryError(
                "Registry {} has no integrity footer".format(self._path)
            )
        expected = digest(body.encode("utf-8")).hex()
        if footer[len(FOOTER_PREFIX) :] != expected:
            raise RegistryError(
                "Registry {} failed its integrity check".format(self._path)
            )
        try:
            return [ArtifactRecord.from_dict(d) for d in json.loads(body)["artifacts"]]
        except (KeyError, TypeError, ValueError, KeyFormatError) as e:
            raise RegistryError(
                "Malformed registry {}: {}".format(self._path, e)
            ) from e

    def _save(self) -> None:
        body = json.dumps(
            {"artifacts": [record.to_dict() for record in self._records]},
            indent=2,
            sort_keys=True,
        )
        footer = FOOTER_PREFIX + digest(body.encode("utf-8")).hex()
        staging = self._path.with_name(self._path.name + ".tmp")
        staging.write_text(body + "\n" + footer + "\n", encoding="utf-8")
        os.replace(staging, self._path)

    def records(self) -> List[ArtifactRecord]:
        with self._lock:
            return list(self._records)

    def lookup(self, name: str, version: str) -> Optional[ArtifactRecord]:
        for record in self.records():
            if record.name == name and record.version == version:
                return record
        return None

    def latest(self, name: str) -> Optional[ArtifactRecord]:
        matching = [record for record in self.records() if record.name == name]
        return max(matching, key=lambda r: r.registered_seq) if matching else None

    def register(
        self,
        name: str,
        version: str,
        measurement: Measurement,
        eval_digest: Optional[Digest] = None,
    ) -> ArtifactRecord:
        if not valid_identifier(name) or not valid_identifier(version):
            raise RegistryError("Artifact name and version must be identifiers")
        with self._lock:
            for existing in self._records:
                if existing.name == name and existing.version == version:
                    if existing.measurement.value != measurement.value:
                        raise MeasurementImmutable(
                            "{} {} is registered with a different measurement".format(
                                name, version
                            )
                        )
                    raise DuplicateArtifact(
                        "{} {} already registered".format(name, version)
                    )
            record = ArtifactRecord(
                name=name,
                version=version,
                measurement=Measurement(measurement.value),
                eval_attestation_digest=eval_digest,
                registered_seq=len(self._records) + 1,
            )
            self._records.append(record)
            self._save()
        if self._audit is not None:
            self._audit.append_event(
                EventKind.REGISTER,
                "registry",
                [artifact_digest(name, version), record.measurement],
            )
        logger.info(
            "Registered {} {} as {}".format(name, version, record.measurement.hex())
        )
        return record

    def check_deployment(
        self,
        name: str,
        version: str,
        report: AttestationReport,
        root_public: bytes,
    ) -> DriftVerdict:
        record = self.lookup(name, version)
        observed = report.measurement
        expected = record.measurement if record is not None else None
        verified = bool(verify_report(root_public, report, observed))
        if record is None:
            status = DriftStatus.UNKNOWN_ARTIFACT
        elif expected.value == observed.value:
            status = DriftStatus.MATCH
        else:
            status = DriftStatus.DRIFT
        if self._audit is not None:
            self._audit.append_event(
                EventKind.DRIFT_CHECK,
                "registry",
                [artifact_digest(name, version), Digest(observed.value)],
            )
        healthy = status is DriftStatus.MATCH and verified
        log = logger.info if healthy else logger.warning
        log(
            "Deployment check {} {}: {} (report {})".format(
                name, version, status.value, "verified" if verified else "NOT verified"
            )
        )
        return DriftVerdict(status, expected, observed, verified)


def check_deployment(
    registry: ArtifactRegistry,
    name: str,
    version: str,
    report: AttestationReport,
    root_public: bytes,
) -> DriftVerdict:
    return registry.check_deployment(name, version, report, root_public)
