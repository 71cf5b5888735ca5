import logging
from typing import Sequence, Union

import numpy as np

from wsdiag.app.exceptions import ParameterError
from wsdiag.app.models.models import PcaModel
from wsdiag.vector_store.embeddings import EmbeddingVector

logger = logging.getLogger(__name__)

VectorsLike = Union[np.ndarray, Sequence[EmbeddingVector], Sequence[Sequence[float]]]


def _as_matrix(vectors: VectorsLike) -> np.ndarray:
    if isinstance(vectors, np.ndarray):
        return np.atleast_2d(vectors).astype(float)
    rows = [v.values if isinstance(v, EmbeddingVector) else np.asarray(v, dtype=float) for v in vectors]
    if not rows:
        return np.zeros((0, 0))
    return np.vstack(rows)


class PcaReducer:
    """
    Principal component analysis by exact symmetric eigendecomposition.

    The covariance (divisor n-1) is decomposed when there are more points than
    dimensions; otherwise the smaller Gram matrix is decomposed and its
    eigenvectors mapped back into feature space.
    """

    def fit(self, vectors: VectorsLike, k: int) -> PcaModel:
        X = _as_matrix(vectors)
        n, d = X.shape
        if n < 2:
            raise ParameterError(f"PCA needs at least 2 points, got {n}")
        if not 1 <= k <= min(d, n - 1):
            raise ParameterError(f"k={k} outside [1, min(dim={d}, n-1={n - 1})]")

        mean = X.mean(axis=0)
        centered = X - mean
        if n > d:
            values, vectors_ = self._covariance_eigen(centered)
        else:
            values, vectors_ = self._gram_eigen(centered)

        components = vectors_[:, :k].T.copy()
        for row in components:
            pivot = int(np.argmax(np.abs(row)))
            if row[pivot] < 0:
                row *= -1.0
        explained = np.clip(values[:k], 0.0, None)
        total = float(np.sum(centered * centered) / (n - 1))

        logger.debug("PCA fitted on %d x %d, k=%d, explained %.4f of variance",
                     n, d, k, explained.sum() / total if total > 0 else 0.0)
        return PcaModel(
            mean=mean.tolist(),
            components=components.tolist(),
            explained_variance=explained.tolist(),
            k=k,
            total_variance=total,
        )

    def _covariance_eigen(self, centered: np.ndarray):
        n = centered.shape[0]
        covariance = centered.T @ centered / (n - 1)
        values, vectors = np.linalg.eigh(covariance)
        order = np.argsort(-values, kind="stable")
        return values[order], vectors[:, order]

    def _gram_eigen(self, centered: np.ndarray):
        n, d = centered.shape
        gram = centered @ centered.T / (n - 1)
        values, u = np.linalg.eigh(gram)
        order = np.argsort(-values, kind="stable")
        values, u = values[order], u[:, order]

        scale = max(abs(values[0]), 1.0) if values.size else 1.0
        tol = scale * max(n, d) * np.finfo(float).eps
        good = values > tol
        mapped = centered.T @ u[:, good] / np.sqrt((n - 1) * values[good])

        # Directions with zero variance: any orthonormal completion will do.
        basis, _ = np.linalg.qr(np.hstack([mapped, np.eye(d)]))
        completion = basis[:, mapped.shape[1]:]
        full_values = np.concatenate([values[good], np.zeros(completion.shape[1])])
        return full_values, np.hstack([mapped, completion])

    def project(self, model: PcaModel, v: Union[EmbeddingVector, np.ndarray]) -> np.ndarray:
        values = v.values if isinstance(v, EmbeddingVector) else np.asarray(v, dtype=float)
        if values.shape[-1] != model.dim:
            raise ParameterError(f"vector dim {values.shape[-1]} does not match PCA dim {model.dim}")
        return (values - model.mean_array) @ model.components_array.T

    def reconstruct(self, model: PcaModel, reduced: np.ndarray) -> np.ndarray:
        return np.asarray(reduced) @ model.components_array + model.mean_array


def fit_pca(vectors: VectorsLike, k: int) -> PcaModel:
    return PcaReducer().fit(vectors, k)


def project_pca(model: PcaModel, v: Union[EmbeddingVector, np.ndarray]) -> np.ndarray:
    """Works on a single vector or on a row-stacked matrix."""
    return PcaReducer().project(model, v)
