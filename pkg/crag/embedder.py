# Deterministic hashed character 3-gram embedding
# Stands in for the in-enclave embedding model at desk scale

import logging

import attr
import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_DIM = 64
GRAM = 3

# FNV-1a 64 bit
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


class EmbeddingError(Exception):
    pass


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK
    return h


def normalize_text(text: str) -> str:
    return " ".join(text.split()).lower()


@attr.s(frozen=True, slots=True, eq=False, repr=False)
class Embedding:
    values: np.ndarray = attr.ib()

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    def to_bytes(self) -> bytes:
        return self.values.astype(">f4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, dim: int) -> "Embedding":
        if len(data) != 4 * dim:
            raise EmbeddingError(
                "Expected {} bytes for dimension {}, got {}".format(
                    4 * dim, dim, len(data)
                )
            )
        values = np.frombuffer(data, dtype=">f4").astype(np.float32)
        values.setflags(write=False)
        return cls(values)

    def __eq__(self, other) -> bool:
        return isinstance(other, Embedding) and np.array_equal(
            self.values, other.values
        )

    def __repr__(self) -> str:
        return "Embedding(dim={})".format(self.dim)


def _grams(text: str):
    if len(text) < GRAM:
        return [text]
    return [text[i : i + GRAM] for i in range(len(text) - GRAM + 1)]


def _accumulate(grams, dim: int) -> np.ndarray:
    vector = np.zeros(dim, dtype=np.float64)
    for gram in grams:
        h = fnv1a64(gram.encode("utf-8"))
        vector[(h >> 1) % dim] += -1.0 if h & 1 else 1.0
    return vector


def embed(text: str, dim: int = DEFAULT_DIM) -> Embedding:
    if not isinstance(dim, int) or dim < 1:
        raise EmbeddingError("Dimension must be a positive integer")
    normalized = normalize_text(text)
    if not normalized:
        raise EmbeddingError("Cannot embed empty or whitespace-only text")
    vector = _accumulate(_grams(normalized), dim)
    norm = np.linalg.norm(vector)
    if norm == 0.0:
        # Every gram cancelled out; fall back to the whole text as one gram
        vector = _accumulate([normalized], dim)
        norm = np.linalg.norm(vector)
    values = (vector / norm).astype(np.float32)
    values.setflags(write=False)
    return Embedding(values)


def similarity(a: Embedding, b: Embedding) -> float:
    if a.dim != b.dim:
        raise EmbeddingError(
            "Dimension mismatch: {} against {}".format(a.dim, b.dim)
        )
    return float(np.dot(a.values.astype(np.float64), b.values.astype(np.float64)))
