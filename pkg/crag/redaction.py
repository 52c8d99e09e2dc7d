# Rule based redaction producing the retrieval view of private records
# Rules apply in list order; within a rule matching is POSIX leftmost-longest

import logging
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple, Union

import attr
import regex

from .crypto import Digest, digest
from .records import CommunityRecord, Visibility

logger = logging.getLogger(__name__)

# Passes over the rule list before giving up on reaching a fixed point
MAX_PASSES = 8


class RedactionError(Exception):
    pass


@attr.s(auto_exc=True)
class RuleError(RedactionError):
    rule_name: str = attr.ib()
    reason: str = attr.ib()

    def __str__(self) -> str:
        return "Rule {}: {}".format(self.rule_name, self.reason)


@attr.s(auto_exc=True)
class BatchRedactionError(RedactionError):
    failures: List[Tuple[str, Exception]] = attr.ib()

    def __str__(self) -> str:
        return "{} records failed redaction: {}".format(
            len(self.failures), ", ".join(rid for rid, _ in self.failures)
        )


@attr.s(frozen=True, slots=True)
class RedactionRule:
    name: str = attr.ib()
    pattern: str = attr.ib()
    replacement_tag: str = attr.ib()


@attr.s(frozen=True, slots=True)
class SafeRecord:
    record_id: str = attr.ib()
    redacted_text: str = attr.ib(repr=False)
    rule_hits: Tuple[Tuple[str, int], ...] = attr.ib()
    source_digest: Digest = attr.ib()


# Demo pack only: pattern redaction on its own is no privacy guarantee
DEFAULT_RULES = (
    RedactionRule(
        "email", r"[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}", "[EMAIL]"
    ),
    RedactionRule("ssn", r"\b[0-9]{3}-[0-9]{2}-[0-9]{4}\b", "[SSN]"),
    RedactionRule(
        "phone",
        r"(\+?1[-. ])?(\([0-9]{3}\) ?|[0-9]{3}[-. ])?\b[0-9]{3}[-. ][0-9]{4}\b",
        "[PHONE]",
    ),
    # Capitalised bigram anywhere, sentence openers included
    RedactionRule("name", r"\b[A-Z][a-z]+ [A-Z][a-z]+\b", "[NAME]"),
)


class Redactor:
    def __init__(self, compiled: Sequence[Tuple[RedactionRule, "regex.Pattern"]]):
        self._compiled = tuple(compiled)

    @property
    def rules(self) -> Tuple[RedactionRule, ...]:
        return tuple(rule for rule, _ in self._compiled)

    def digest(self) -> Digest:
        return digest(dump_rules(self.rules).encode("utf-8"))

    def residual_matches(self, text: str) -> List[str]:
        return [rule.name for rule, pattern in self._compiled if pattern.search(text)]

    def redact_text(self, text: str) -> Tuple[str, Tuple[Tuple[str, int], ...]]:
        hits = {rule.name: 0 for rule, _ in self._compiled}
        for _ in range(MAX_PASSES):
            changed = False
            for rule, pattern in self._compiled:
                text, count = pattern.subn(rule.replacement_tag, text)
                if count:
                    hits[rule.name] += count
                    changed = True
            if not changed:
                break
        else:
            if self.residual_matches(text):
                raise RedactionError(
                    "Redaction did not settle within {} passes".format(MAX_PASSES)
                )
        return text, tuple((name, n) for name, n in hits.items() if n)


def compile_rules(rules: Iterable[RedactionRule]) -> Redactor:
    compiled = []
    seen = set()
    for rule in rules:
        if rule.name in seen:
            raise RuleError(rule.name, "duplicate rule name")
        seen.add(rule.name)
        try:
            pattern = regex.compile(rule.pattern, flags=regex.POSIX | regex.V0)
        except regex.error as e:
            raise RuleError(rule.name, "pattern does not compile ({})".format(e))
        if not rule.replacement_tag:
            raise RuleError(rule.name, "replacement tag is empty")
        if pattern.search(rule.replacement_tag):
            raise RuleError(rule.name, "replacement tag matches its own pattern")
        compiled.append((rule, pattern))
    return Redactor(compiled)


def load_rules(source: Union[str, Path]) -> List[RedactionRule]:
    """Rules file: one rule per line, tab separated name, pattern and tag"""
    return parse_rules(Path(source).read_text(encoding="utf-8"), str(source))


def parse_rules(text: str, source: str = "<rules>") -> List[RedactionRule]:
    rules = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise RedactionError(
                "{}:{} expected 3 tab separated fields, got {}".format(
                    source, lineno, len(fields)
                )
            )
        rules.append(RedactionRule(*fields))
    return rules


def dump_rules(rules: Iterable[RedactionRule]) -> str:
    return "".join(
        "{}\t{}\t{}\n".format(rule.name, rule.pattern, rule.replacement_tag)
        for rule in rules
    )


def default_redactor() -> Redactor:
    return compile_rules(DEFAULT_RULES)


def redact_record(redactor: Redactor, record: CommunityRecord) -> SafeRecord:
    if record.visibility is not Visibility.PRIVATE:
        raise RedactionError(
            "Record {} is open data and bypasses redaction".format(record.record_id)
        )
    redacted, hits = redactor.redact_text(record.text)
    return SafeRecord(
        record_id=record.record_id,
        redacted_text=redacted,
        rule_hits=hits,
        source_digest=digest(record.text.encode("utf-8")),
    )


def batch_sanitize(
    redactor: Redactor, records: Sequence[CommunityRecord]
) -> List[SafeRecord]:
    results, failures = [], []
    for record in records:
        try:
            results.append(redact_record(redactor, record))
        except RedactionError as e:
            failures.append((record.record_id, e))
    if failures:
        raise BatchRedactionError(failures)
    logger.debug("Sanitized {} records".format(len(results)))
    return results
