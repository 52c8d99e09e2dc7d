import json
import random
import time
from concurrent.futures import ThreadPoolExecutor

import attr
import pytest

from crag.audit import (
    AuditEntry,
    AuditError,
    AuditLog,
    ChainFault,
    EventKind,
    filter_entries,
    load_entries,
    verify_chain,
    verify_file,
)
from crag.crypto import digest
from crag.enclave import Platform

from .conftest import CODE_ID, measured_config


def _fill(log, count):
    for i in range(count):
        log.append_event(
            EventKind.INGEST, "contrib-{}".format(i % 7), [digest(b"%d" % i)]
        )


def test_entries_chain_and_verify(tmp_path, audit, enclave):
    _fill(audit, 5)
    entries = audit.entries()
    assert [e.seq for e in entries] == list(range(5))
    assert entries[0].prev_digest.value == bytes(32)
    for prev, entry in zip(entries, entries[1:]):
        assert entry.prev_digest == prev.entry_digest
    assert audit.verify()
    assert verify_file(tmp_path / "audit.jsonl", enclave.signing_public)


def test_only_identifiers_and_digests_are_accepted(audit):
    with pytest.raises(AuditError):
        audit.append_event(EventKind.INGEST, "has spaces in it", [])
    with pytest.raises(AuditError):
        audit.append_event(EventKind.INGEST, "actor", ["raw text subject"])
    with pytest.raises(AuditError):
        audit.append_event("ingest", "actor", [])
    assert len(audit) == 0


def test_reopen_continues_the_chain(tmp_path, enclave):
    path = tmp_path / "reopen.jsonl"
    first = AuditLog(path, enclave)
    _fill(first, 3)
    first.close()

    second = AuditLog(path, enclave)
    entry = second.append_event(EventKind.BOOT, "enclave", [enclave.measurement])
    second.close()
    assert entry.seq == 3
    assert verify_file(path, enclave.signing_public)


def test_reopen_by_another_enclave_is_refused(tmp_path, enclave):
    path = tmp_path / "foreign.jsonl"
    log = AuditLog(path, enclave)
    _fill(log, 2)
    log.close()
    stranger = Platform.generate().boot(CODE_ID, measured_config())
    with pytest.raises(AuditError):
        AuditLog(path, stranger)


def test_query_events_filters(audit):
    subject = digest(b"record-7")
    audit.append_event(EventKind.INGEST, "alice", [subject])
    audit.append_event(EventKind.QUERY_RECEIVED, "clinic", [digest(b"prompt")])
    audit.append_event(
        EventKind.UPDATE, "alice", [subject, digest(b"old"), digest(b"new")]
    )
    assert [e.seq for e in audit.query_events(kind=EventKind.INGEST)] == [0]
    assert [e.seq for e in audit.query_events(actor="alice")] == [0, 2]
    assert [e.seq for e in audit.query_events(subject=subject)] == [0, 2]
    assert [e.seq for e in audit.query_events(seq_range=(1, 3))] == [1, 2]
    assert filter_entries(audit.entries(), actor="nobody") == []


def test_json_form_round_trips(audit):
    _fill(audit, 2)
    for entry in audit.entries():
        assert AuditEntry.from_json(entry.to_json()) == entry
    with pytest.raises(AuditError):
        AuditEntry.from_json("[]")
    with pytest.raises(AuditError):
        AuditEntry.from_json(json.dumps({"seq": 0}))


def test_in_memory_log(enclave):
    log = AuditLog(None, enclave)
    _fill(log, 3)
    assert log.verify()
    log.close()


def test_dropping_the_head_is_a_seq_gap(audit, enclave):
    _fill(audit, 4)
    entries = audit.entries()
    assert verify_chain(entries[:3], enclave.signing_public)
    verdict = verify_chain(entries[1:], enclave.signing_public)
    assert verdict.first_bad_seq == 0
    assert verdict.reason is ChainFault.SEQ_GAP


def test_malformed_line_is_reported(tmp_path, enclave):
    path = tmp_path / "broken.jsonl"
    log = AuditLog(path, enclave)
    _fill(log, 3)
    log.close()
    lines = path.read_text(encoding="utf-8").splitlines()
    lines[1] = lines[1][:-10]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    verdict = verify_file(path, enclave.signing_public)
    assert (verdict.valid, verdict.first_bad_seq, verdict.reason) == (
        False,
        1,
        ChainFault.MALFORMED,
    )
    with pytest.raises(AuditError):
        load_entries(path)


def _flip_random_byte(rng, line):
    """One byte changed inside a hex field, so the line still parses"""
    data = json.loads(line)
    field = rng.choice(
        ["prev_digest", "entry_digest", "signature", "subject_digests", "actor"]
    )
    if field == "subject_digests":
        value = data[field][0]
    else:
        value = data[field]
    index = rng.randrange(len(value))
    alphabet = "0123456789abcdef" if field != "actor" else "abcdefghijklmnopqrstuvwxyz"
    replacement = rng.choice([c for c in alphabet if c != value[index]])
    value = value[:index] + replacement + value[index + 1 :]
    if field == "subject_digests":
        data[field][0] = value
    else:
        data[field] = value
    return json.dumps(data, separators=(",", ":"))


@pytest.mark.slow
def test_every_single_entry_mutation_is_located(tmp_path, enclave):
    path = tmp_path / "long.jsonl"
    log = AuditLog(path, enclave)
    _fill(log, 1000)
    log.close()
    lines = path.read_text(encoding="utf-8").splitlines()

    started = time.monotonic()
    assert verify_file(path, enclave.signing_public)
    assert time.monotonic() - started < 1.0

    entries = [AuditEntry.from_json(line) for line in lines]
    rng = random.Random(7)
    for index in range(len(lines)):
        mutated = list(entries)
        mutated[index] = AuditEntry.from_json(_flip_random_byte(rng, lines[index]))
        verdict = verify_chain(mutated, enclave.signing_public)
        assert not verdict
        assert verdict.first_bad_seq == index


def test_a_mutation_in_a_short_chain_is_located(audit, enclave):
    _fill(audit, 20)
    lines = [entry.to_json() for entry in audit.entries()]
    rng = random.Random(11)
    for index in (0, 7, 19):
        mutated = [AuditEntry.from_json(line) for line in lines]
        mutated[index] = AuditEntry.from_json(_flip_random_byte(rng, lines[index]))
        assert verify_chain(mutated, enclave.signing_public).first_bad_seq == index


def _line_of(data, position):
    return data.count(b"\n", 0, position)


def _assert_flip_located(path, enclave, original, position, mask):
    flipped = bytearray(original)
    flipped[position] ^= mask
    path.write_bytes(bytes(flipped))
    verdict = verify_file(path, enclave.signing_public)
    assert not verdict, (position, mask)
    assert verdict.first_bad_seq == _line_of(original, position), (position, mask)


def test_high_bit_flips_in_the_file_are_located(tmp_path, enclave):
    path = tmp_path / "raw.jsonl"
    log = AuditLog(path, enclave)
    _fill(log, 5)
    log.close()
    original = path.read_bytes()
    start = original.index(b"\n", original.index(b"\n") + 1) + 1
    end = original.index(b"\n", start) + 1
    for position in range(start, end):
        _assert_flip_located(path, enclave, original, position, 0x80)


@pytest.mark.slow
@pytest.mark.parametrize("mask", [0x01, 0x20, 0x80, 0xFF])
def test_every_raw_byte_flip_is_located(tmp_path, enclave, mask):
    path = tmp_path / "raw.jsonl"
    log = AuditLog(path, enclave)
    _fill(log, 5)
    log.close()
    original = path.read_bytes()
    for position in range(len(original)):
        _assert_flip_located(path, enclave, original, position, mask)


def test_uppercased_hex_is_not_accepted(tmp_path, enclave):
    path = tmp_path / "case.jsonl"
    log = AuditLog(path, enclave)
    _fill(log, 3)
    log.close()
    lines = path.read_text(encoding="utf-8").splitlines()
    data = json.loads(lines[1])
    data["signature"] = data["signature"].upper()
    lines[1] = json.dumps(data, separators=(",", ":"))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    verdict = verify_file(path, enclave.signing_public)
    assert (verdict.first_bad_seq, verdict.reason) == (1, ChainFault.MALFORMED)


def test_reordered_entries_are_located(audit, enclave):
    _fill(audit, 6)
    entries = audit.entries()
    entries[2], entries[3] = entries[3], entries[2]
    verdict = verify_chain(entries, enclave.signing_public)
    assert (verdict.first_bad_seq, verdict.reason) == (2, ChainFault.SEQ_GAP)


def test_deleted_entry_is_located(audit, enclave):
    _fill(audit, 6)
    entries = audit.entries()
    del entries[4]
    verdict = verify_chain(entries, enclave.signing_public)
    assert (verdict.first_bad_seq, verdict.reason) == (4, ChainFault.SEQ_GAP)


def test_inserted_entries_are_located(audit, enclave):
    _fill(audit, 6)
    entries = audit.entries()

    replayed = entries[:3] + [entries[1]] + entries[3:]
    assert verify_chain(replayed, enclave.signing_public).first_bad_seq == 3

    # A forger can renumber and relink, but cannot sign as the enclave
    stranger = Platform.generate().boot(CODE_ID, measured_config())
    forged_log = AuditLog(None, stranger)
    for entry in entries[:3]:
        forged_log.append_event(entry.event_kind, entry.actor, entry.subject_digests)
    forged = forged_log.entries()[2]
    forged = attr.evolve(forged, prev_digest=entries[2].entry_digest, seq=3)
    forged = attr.evolve(forged, entry_digest=forged.compute_digest())
    inserted = entries[:3] + [forged]
    verdict = verify_chain(inserted, enclave.signing_public)
    assert (verdict.first_bad_seq, verdict.reason) == (3, ChainFault.BAD_SIGNATURE)


def test_reopen_refuses_a_tampered_middle(tmp_path, enclave):
    path = tmp_path / "tampered.jsonl"
    log = AuditLog(path, enclave)
    _fill(log, 4)
    log.close()
    lines = path.read_text(encoding="utf-8").splitlines()
    lines[1] = _flip_random_byte(random.Random(3), lines[1])
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    with pytest.raises(AuditError):
        AuditLog(path, enclave)


def test_concurrent_appends_get_a_total_order(tmp_path, enclave):
    path = tmp_path / "concurrent.jsonl"
    log = AuditLog(path, enclave)

    def worker(n):
        for i in range(50):
            log.append_event(
                EventKind.QUERY_RECEIVED,
                "client-{}".format(n),
                [digest(b"%d-%d" % (n, i))],
            )

    with ThreadPoolExecutor(max_workers=8) as pool:
        list(pool.map(worker, range(8)))
    log.close()

    entries = load_entries(path)
    assert [e.seq for e in entries] == list(range(400))
    assert verify_file(path, enclave.signing_public)
    subjects = {e.subject_digests[0] for e in entries}
    assert len(subjects) == 400
    for n in range(8):
        mine = [e for e in entries if e.actor == "client-{}".format(n)]
        expected = [digest(b"%d-%d" % (n, i)) for i in range(50)]
        assert [e.subject_digests[0] for e in mine] == expected
