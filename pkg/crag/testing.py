# Test-only exports: the plaintext retrieval oracle and the canary harness

import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Tuple, Union

import attr
import numpy as np

from .embedder import DEFAULT_DIM, embed, similarity
from .enclave import BoundaryViolation


def plaintext_oracle_topk(
    corpus: Iterable[Tuple[str, str]], query_text: str, k: int, dim: int = DEFAULT_DIM
) -> List[Tuple[str, float]]:
    """Brute force top-k over plaintext with the store's tie-break"""
    corpus = list(corpus)
    if not corpus:
        return []
    query = embed(query_text, dim)
    scored = [
        (record_id, similarity(query, embed(text, dim))) for record_id, text in corpus
    ]
    scored.sort(key=lambda item: (-item[1], item[0]))
    return scored[:k]


class CanaryMonitor:
    """Flags planted canary strings in values, log records and files"""

    def __init__(self, canaries: Iterable[str]):
        self.canaries = [canary.encode("utf-8") for canary in canaries]
        self.violations: List[str] = []

    def _hits(self, data: bytes) -> List[str]:
        return [c.decode("utf-8") for c in self.canaries if c in data]

    def scan_value(self, value: Any, _seen=None) -> List[str]:
        seen = _seen if _seen is not None else set()
        if id(value) in seen:
            return []
        seen.add(id(value))
        if isinstance(value, str):
            return self._hits(value.encode("utf-8"))
        if isinstance(value, (bytes, bytearray, memoryview)):
            return self._hits(bytes(value))
        if isinstance(value, np.ndarray):
            return self._hits(value.tobytes())
        if isinstance(value, dict):
            items = list(value.keys()) + list(value.values())
        elif isinstance(value, (list, tuple, set, frozenset)):
            items = list(value)
        elif attr.has(type(value)):
            items = [getattr(value, a.name) for a in attr.fields(type(value))]
        else:
            items = [repr(value)]
        hits = []
        for item in items:
            hits.extend(self.scan_value(item, seen))
        return hits

    def __call__(self, value: Any) -> None:
        hits = self.scan_value(value)
        if hits:
            self.violations.extend(hits)
            raise BoundaryViolation(
                "{} canaries crossed the enclave boundary".format(len(hits))
            )

    def scan_file(self, path: Union[str, Path]) -> List[str]:
        return self._hits(Path(path).read_bytes())

    def scan_tree(self, root: Union[str, Path]) -> Dict[str, List[str]]:
        found = {}
        for path in sorted(Path(root).rglob("*")):
            if path.is_file():
                hits = self.scan_file(path)
                if hits:
                    found[str(path)] = hits
        return found

    def log_handler(self) -> "CanaryLogHandler":
        return CanaryLogHandler(self)


class CanaryLogHandler(logging.Handler):
    def __init__(self, monitor: CanaryMonitor):
        super().__init__(level=logging.DEBUG)
        self.monitor = monitor
        self.lines: List[str] = []
        self.setFormatter(logging.Formatter("%(name)s %(levelname)s %(message)s"))

    def emit(self, record: logging.LogRecord) -> None:
        line = self.format(record)
        self.lines.append(line)
        self.monitor.violations.extend(self.monitor._hits(line.encode("utf-8")))


def canary_texts(count: int, prefix: str = "CANARY") -> Sequence[str]:
    return ["{}-{:04d}-zq{}x".format(prefix, i, i * 7919) for i in range(count)]
