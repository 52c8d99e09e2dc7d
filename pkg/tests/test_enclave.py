import os

import pytest

from crag.crypto import Digest, digest
from crag.enclave import (
    AttestationReport,
    BoundaryViolation,
    EnclaveError,
    Measurement,
    Platform,
    RejectReason,
    SealedBlob,
    SealingError,
    boot_enclave,
    egress_monitor,
    enclave_resident,
    inside_enclave,
    require_enclave,
    resident_method,
    verify_report,
)

from .conftest import CODE_ID, measured_config


@enclave_resident
def _echo(value):
    return value


@enclave_resident
def _where():
    return inside_enclave()


def _not_registered():
    return "plaintext"


class _Holder:
    def __init__(self, enclave):
        self.enclave = enclave

    @resident_method
    def secret_view(self):
        return "inner"

    def outer(self):
        return self.enclave.exec(self._outer)

    @resident_method
    def _outer(self):
        return [self.enclave.exec(_echo, "nested"), self.secret_view()]


def test_boot_is_deterministic_per_code_config_and_device(platform):
    first = platform.boot(CODE_ID, measured_config())
    again = platform.boot(CODE_ID, measured_config())
    assert first.measurement == again.measurement
    assert first.pk_tee == again.pk_tee
    assert first.signing_public == again.signing_public

    other_config = platform.boot(CODE_ID, measured_config(k=5))
    assert other_config.measurement != first.measurement
    assert other_config.pk_tee != first.pk_tee

    other_device = Platform.generate().boot(CODE_ID, measured_config())
    assert other_device.measurement == first.measurement
    assert other_device.pk_tee != first.pk_tee


def test_boot_rejects_bad_inputs():
    with pytest.raises(EnclaveError):
        boot_enclave(b"", b"{}", os.urandom(32))
    with pytest.raises(EnclaveError):
        boot_enclave(CODE_ID, b"", os.urandom(32))
    with pytest.raises(EnclaveError):
        boot_enclave(CODE_ID, b"{}", b"short")


def test_exec_runs_only_registered_logic(enclave):
    assert enclave.exec(_echo, 3) == 3
    assert enclave.exec(_where) is True
    assert not inside_enclave()
    with pytest.raises(EnclaveError):
        enclave.exec(_not_registered)


def test_resident_methods_refuse_calls_from_outside(enclave):
    holder = _Holder(enclave)
    with pytest.raises(BoundaryViolation):
        holder.secret_view()
    with pytest.raises(BoundaryViolation):
        require_enclave()
    assert holder.outer() == ["nested", "inner"]


def test_egress_monitors_see_only_the_outermost_value(enclave):
    seen = []
    with egress_monitor(enclave, seen.append):
        _Holder(enclave).outer()
        enclave.exec(_echo, "second")
    enclave.exec(_echo, "after removal")
    assert seen == [["nested", "inner"], "second"]


def test_egress_monitor_can_block_a_value(enclave):
    def refuse(value):
        if value == "forbidden":
            raise BoundaryViolation("blocked")

    with egress_monitor(enclave, refuse):
        assert enclave.exec(_echo, "fine") == "fine"
        with pytest.raises(BoundaryViolation):
            enclave.exec(_echo, "forbidden")
    assert not inside_enclave()


def test_seal_round_trip_and_tamper(enclave):
    blob = enclave.seal(b"master key material")
    assert blob.sealed_by == enclave.measurement
    restored = SealedBlob.from_bytes(blob.to_bytes())
    assert enclave.unseal(restored) == b"master key material"

    data = bytearray(blob.to_bytes())
    data[-1] ^= 0x01
    with pytest.raises(SealingError):
        enclave.unseal(SealedBlob.from_bytes(bytes(data)))
    with pytest.raises(SealingError):
        SealedBlob.from_bytes(b"\x00" * 10)


def test_sealing_binds_device_secret_and_config():
    for i in range(100):
        secret, other_secret = os.urandom(32), os.urandom(32)
        config, other_config = measured_config(k=1 + i), measured_config(k=200 + i)
        sealer = boot_enclave(CODE_ID, config, secret)
        blob = sealer.seal(b"payload-%d" % i)

        assert boot_enclave(CODE_ID, config, secret).unseal(blob) == b"payload-%d" % i
        for device, cfg_bytes in (
            (other_secret, config),
            (secret, other_config),
            (other_secret, other_config),
        ):
            with pytest.raises(SealingError):
                boot_enclave(CODE_ID, cfg_bytes, device).unseal(blob)


def test_report_verification(platform, enclave):
    report = platform.attest(enclave, digest(b"nonce"))
    assert report.report_data == digest(b"nonce")
    assert report.enclave_signing_public == enclave.signing_public
    assert verify_report(platform.root_public, report, enclave.measurement)

    other = Measurement.of(b"other", b"{}")
    verdict = verify_report(platform.root_public, report, other)
    assert not verdict
    assert verdict.reason is RejectReason.MEASUREMENT_MISMATCH

    foreign_root = Platform.generate().root_public
    verdict = verify_report(foreign_root, report, enclave.measurement)
    assert verdict.reason is RejectReason.BAD_ROOT_SIGNATURE


def test_report_bytes_are_covered_by_the_root_signature(platform, enclave):
    data = platform.attest(enclave, Digest.zero()).to_bytes()
    assert len(data) == AttestationReport.SIZE
    for index in range(0, len(data), 7):
        flipped = bytearray(data)
        flipped[index] ^= 0x80
        tampered = AttestationReport.from_bytes(bytes(flipped))
        assert not verify_report(platform.root_public, tampered, tampered.measurement)


def test_report_parsing_rejects_wrong_sizes():
    with pytest.raises(EnclaveError):
        AttestationReport.from_bytes(b"\x00" * 10)
    with pytest.raises(EnclaveError):
        AttestationReport.from_hex("not hex")


def test_enclave_repr_hides_keys(enclave):
    text = repr(enclave)
    assert enclave.agreement_keys.export_secret().hex() not in text
    assert enclave.measurement.hex() in text
