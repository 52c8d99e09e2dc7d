import random

import pytest

from crag.records import CommunityRecord
from crag.redaction import (
    BatchRedactionError,
    RedactionError,
    RedactionRule,
    RuleError,
    batch_sanitize,
    compile_rules,
    dump_rules,
    load_rules,
    parse_rules,
    redact_record,
)

WORDS = (
    "the patient reported mild fever and fatigue for three days "
    "clinic notes mention rest fluids and follow up visit scheduled "
    "symptoms improved after treatment with no further complaints"
).split()


def _private(record_id, text):
    return CommunityRecord(record_id, text, "private", "contrib")


def _fuzz_document(rng):
    pieces = []
    for _ in range(rng.randint(5, 30)):
        roll = rng.random()
        if roll < 0.08:
            pieces.append(
                "user{}@example{}.org".format(rng.randint(0, 999), rng.randint(0, 9))
            )
        elif roll < 0.14:
            pieces.append(
                "{:03d}-{:02d}-{:04d}".format(
                    rng.randint(100, 999), rng.randint(10, 99), rng.randint(1000, 9999)
                )
            )
        elif roll < 0.20:
            pieces.append(
                "555-{:03d}-{:04d}".format(rng.randint(100, 999), rng.randint(0, 9999))
            )
        elif roll < 0.26:
            pieces.append(
                rng.choice(["Jane Doe", "Omar Haddad", "Li Wei", "Ana Souza"])
            )
        else:
            pieces.append(rng.choice(WORDS))
    return " ".join(pieces) + "."


def test_default_rules_redact_identifiers(redactor):
    safe = redact_record(
        redactor,
        _private(
            "r1",
            "Call 555-123-4567 or mail jane.doe@example.org, "
            "ask for Jane Doe. SSN 123-45-6789.",
        ),
    )
    assert "[PHONE]" in safe.redacted_text
    assert "[EMAIL]" in safe.redacted_text
    assert "[NAME]" in safe.redacted_text
    assert "[SSN]" in safe.redacted_text
    assert "Jane Doe" not in safe.redacted_text
    assert dict(safe.rule_hits)["email"] == 1
    assert redactor.residual_matches(safe.redacted_text) == []


def test_open_records_bypass_redaction(redactor):
    record = CommunityRecord("r2", "Contact jane@example.org", "open", "contrib")
    with pytest.raises(RedactionError):
        redact_record(redactor, record)


def test_fuzz_corpus_has_no_residual_matches_and_is_idempotent(redactor):
    rng = random.Random(20240611)
    records = [_private("doc-{}".format(i), _fuzz_document(rng)) for i in range(500)]
    for safe in batch_sanitize(redactor, records):
        assert redactor.residual_matches(safe.redacted_text) == []
        again, hits = redactor.redact_text(safe.redacted_text)
        assert again == safe.redacted_text
        assert hits == ()


def test_replacements_are_reapplied_until_nothing_matches():
    redactor = compile_rules([RedactionRule("ab", "ab", "b")])
    text, hits = redactor.redact_text("aaab")
    assert text == "b"
    assert hits == (("ab", 3),)


def test_redaction_that_cannot_settle_is_an_error():
    redactor = compile_rules([RedactionRule("ab", "ab", "b")])
    with pytest.raises(RedactionError):
        redactor.redact_text("a" * 12 + "b")


def test_rule_validation():
    with pytest.raises(RuleError):
        compile_rules([RedactionRule("x", "a", "[X]"), RedactionRule("x", "b", "[X]")])
    with pytest.raises(RuleError):
        compile_rules([RedactionRule("broken", "(", "[X]")])
    with pytest.raises(RuleError):
        compile_rules([RedactionRule("digits", "[0-9]+", "[0]")])
    with pytest.raises(RuleError):
        compile_rules([RedactionRule("empty-tag", "abc", "")])


def test_rules_file_round_trip(tmp_path, redactor):
    path = tmp_path / "rules.tsv"
    path.write_text("# comment\n\n" + dump_rules(redactor.rules), encoding="utf-8")
    assert compile_rules(load_rules(path)).digest() == redactor.digest()
    with pytest.raises(RedactionError):
        parse_rules("name\tpattern-only\n")


def test_batch_reports_every_failure(redactor):
    records = [
        _private("ok", "fine text"),
        CommunityRecord("open-1", "open text", "open", "contrib"),
        CommunityRecord("open-2", "open text", "open", "contrib"),
    ]
    with pytest.raises(BatchRedactionError) as info:
        batch_sanitize(redactor, records)
    assert [record_id for record_id, _ in info.value.failures] == ["open-1", "open-2"]


@pytest.mark.parametrize(
    "text, expected",
    [
        ("John Smith called about rent.", "[NAME] called about rent."),
        ("Rent paid. Mary Jones left early.", "Rent paid. [NAME] left early."),
        ("Seen by Omar Haddad today", "Seen by [NAME] today"),
        ("Rent paid!  Li Wei: moved out", "Rent paid!  [NAME]: moved out"),
    ],
)
def test_names_are_redacted_wherever_they_stand(redactor, text, expected):
    redacted, hits = redactor.redact_text(text)
    assert redacted == expected
    assert dict(hits)["name"] == 1
