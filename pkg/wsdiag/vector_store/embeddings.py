import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple

import numpy as np

from wsdiag.app.exceptions import ExternalEmbeddingError, ParameterError
from wsdiag.app.schemas.schemas import EmbedderConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    values: np.ndarray
    degenerate: bool = False

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


class HashedNgramEmbedder:
    """
    Signed feature hashing over word unigrams and boundary-marked character n-grams.
    """

    def __init__(self, config: EmbedderConfig):
        if config.provider != "hashed_ngram":
            raise ParameterError(f"HashedNgramEmbedder cannot serve provider {config.provider!r}")
        self.config = config
        self._token_cache: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}

    def embed(self, tokens: Sequence[str]) -> EmbeddingVector:
        values = self._accumulate(tokens)
        norm = float(np.linalg.norm(values))
        if norm == 0.0:
            return EmbeddingVector(values=values, degenerate=True)
        return EmbeddingVector(values=values / norm)

    def embed_many(self, token_lists: Iterable[Sequence[str]]) -> Tuple[np.ndarray, np.ndarray]:
        """Row-stacked vectors plus a boolean mask of degenerate rows."""
        vectors = [self.embed(tokens) for tokens in token_lists]
        if not vectors:
            return np.zeros((0, self.config.dim)), np.zeros(0, dtype=bool)
        matrix = np.vstack([v.values for v in vectors])
        mask = np.array([v.degenerate for v in vectors], dtype=bool)
        return matrix, mask

    def _accumulate(self, tokens: Sequence[str]) -> np.ndarray:
        values = np.zeros(self.config.dim, dtype=float)
        for token in tokens:
            buckets, signs = self._token_features(token)
            values[buckets] += signs
        return values

    def _token_features(self, token: str) -> Tuple[np.ndarray, np.ndarray]:
        cached = self._token_cache.get(token)
        if cached is not None:
            return cached

        summed: Dict[int, float] = {}
        for feature in self._features(token):
            bucket, sign = self._hash(feature)
            summed[bucket] = summed.get(bucket, 0.0) + sign
        buckets = np.fromiter(summed.keys(), dtype=np.int64, count=len(summed))
        signs = np.fromiter(summed.values(), dtype=float, count=len(summed))
        self._token_cache[token] = (buckets, signs)
        return buckets, signs

    def _features(self, token: str) -> List[str]:
        features = [f"w:{token}"]
        marked = f"<{token}>"
        low, high = self.config.char_ngram_range
        for n in range(low, high + 1):
            features.extend(marked[i:i + n] for i in range(len(marked) - n + 1))
        return features

    def _hash(self, feature: str) -> Tuple[int, float]:
        digest = hashlib.blake2b(
            f"{self.config.hash_seed}:{feature}".encode("utf-8"), digest_size=8
        ).digest()
        value = int.from_bytes(digest, "big")
        sign = -1.0 if value >> 63 else 1.0
        return value % self.config.dim, sign


def embed_text(tokens: Sequence[str], cfg: EmbedderConfig) -> EmbeddingVector:
    return HashedNgramEmbedder(cfg).embed(tokens)


def embedder_fingerprint(cfg: EmbedderConfig) -> str:
    payload = json.dumps(cfg.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def load_external_embeddings(path: Path, expected_ids: Iterable[str]) -> Dict[str, EmbeddingVector]:
    """
    Read {id, vector} JSONL rows computed elsewhere and re-normalize them.
    """
    expected = set(expected_ids)
    vectors: Dict[str, EmbeddingVector] = {}
    dim = None

    with Path(path).open(encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                item_id = str(record["id"])
                values = np.asarray(record["vector"], dtype=float)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ExternalEmbeddingError(f"line {line_number}: malformed embedding row ({e})") from e

            if item_id in vectors:
                raise ExternalEmbeddingError(f"duplicate embedding for id={item_id}")
            if values.ndim != 1 or values.size == 0:
                raise ExternalEmbeddingError(f"embedding for id={item_id} is not a flat vector")
            if dim is None:
                dim = values.size
            elif values.size != dim:
                raise ExternalEmbeddingError(
                    f"ragged embedding dimensions: id={item_id} has dim {values.size}, expected {dim}"
                )
            if not np.all(np.isfinite(values)):
                raise ExternalEmbeddingError(f"non-finite values in embedding for id={item_id}")
            if item_id not in expected:
                continue

            norm = float(np.linalg.norm(values))
            vectors[item_id] = (
                EmbeddingVector(values=values / norm) if norm > 0
                else EmbeddingVector(values=values, degenerate=True)
            )

    missing = sorted(expected - set(vectors))
    if missing:
        raise ExternalEmbeddingError(f"missing embedding for id={missing[0]}")
    logger.info("Loaded %d external embeddings of dim %s from %s", len(vectors), dim, path)
    return vectors


def save_vectors(path: Path, vectors: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as handle:
        for item_id, values in vectors.items():
            row = {"id": item_id, "vector": [float(x) for x in np.asarray(values).ravel()]}
            handle.write(json.dumps(row) + "\n")
    return path


def read_vectors(path: Path) -> Dict[str, np.ndarray]:
    vectors = {}
    with Path(path).open(encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                row = json.loads(line)
                vectors[row["id"]] = np.asarray(row["vector"], dtype=float)
    return vectors
