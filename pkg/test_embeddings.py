import json
import math

import numpy as np
import pytest

from wsdiag.app.exceptions import ExternalEmbeddingError, ParameterError
from wsdiag.app.schemas.schemas import EmbedderConfig
from wsdiag.vector_store.embeddings import (
    HashedNgramEmbedder,
    embed_text,
    embedder_fingerprint,
    load_external_embeddings,
    read_vectors,
    save_vectors,
)
from wsdiag.vector_store.pca import PcaReducer, fit_pca, project_pca


def jacobi_eigenvalues(matrix, sweeps=100):
    """Cyclic Jacobi rotations on a symmetric matrix."""
    a = np.array(matrix, dtype=float)
    n = a.shape[0]
    for _ in range(sweeps):
        off = math.sqrt(sum(a[i, j] ** 2 for i in range(n) for j in range(n) if i != j))
        if off < 1e-15:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * a[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1))
                c = 1 / math.sqrt(t * t + 1)
                s = t * c
                rotation = np.eye(n)
                rotation[p, p] = rotation[q, q] = c
                rotation[p, q], rotation[q, p] = s, -s
                a = rotation.T @ a @ rotation
    return sorted(np.diag(a), reverse=True)


def _cosine(a, b):
    return float(a.values @ b.values)


def test_embedding_is_deterministic_and_unit_norm():
    cfg = EmbedderConfig()
    first = embed_text(["bronchiolite"], cfg)
    second = embed_text(["bronchiolite"], cfg)
    assert np.array_equal(first.values, second.values)
    assert first.dim == 768
    assert math.isclose(np.linalg.norm(first.values), 1.0, rel_tol=1e-12)
    assert not first.degenerate


def test_empty_tokens_are_degenerate():
    vector = embed_text([], EmbedderConfig(dim=32))
    assert vector.degenerate
    assert not vector.values.any()


def test_related_strings_are_closer():
    embedder = HashedNgramEmbedder(EmbedderConfig())
    mild = embedder.embed(["bronchiolite", "lieve"])
    acute = embedder.embed(["bronchiolite", "acuta"])
    otitis = embedder.embed(["otite", "media"])
    assert _cosine(mild, acute) > _cosine(mild, otitis)


def test_hash_seed_changes_vectors():
    a = embed_text(["febbre"], EmbedderConfig(hash_seed=1))
    b = embed_text(["febbre"], EmbedderConfig(hash_seed=2))
    assert not np.array_equal(a.values, b.values)


def test_embed_many_masks_degenerate_rows():
    embedder = HashedNgramEmbedder(EmbedderConfig(dim=64))
    matrix, mask = embedder.embed_many([["otite"], [], ["febbre"]])
    assert matrix.shape == (3, 64)
    assert mask.tolist() == [False, True, False]


def test_hashed_embedder_refuses_external_provider():
    with pytest.raises(ParameterError):
        HashedNgramEmbedder(EmbedderConfig(provider="external_file"))


def test_fingerprint_tracks_config():
    assert embedder_fingerprint(EmbedderConfig()) == embedder_fingerprint(EmbedderConfig())
    assert embedder_fingerprint(EmbedderConfig()) != embedder_fingerprint(EmbedderConfig(dim=512))


def _write_rows(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


def test_external_embeddings_loaded_and_normalized(tmp_path):
    path = _write_rows(tmp_path / "e.jsonl", [
        {"id": "a", "vector": [3.0, 4.0]},
        {"id": "b", "vector": [0.0, 2.0]},
        {"id": "extra", "vector": [1.0, 1.0]},
    ])
    vectors = load_external_embeddings(path, {"a", "b"})
    assert set(vectors) == {"a", "b"}
    assert np.allclose(vectors["a"].values, [0.6, 0.8])
    assert np.allclose(vectors["b"].values, [0.0, 1.0])


def test_external_embeddings_missing_id(tmp_path):
    path = _write_rows(tmp_path / "e.jsonl", [{"id": "a", "vector": [1.0, 0.0]}])
    with pytest.raises(ExternalEmbeddingError, match="missing embedding for id=b"):
        load_external_embeddings(path, {"a", "b"})


def test_external_embeddings_ragged(tmp_path):
    path = _write_rows(tmp_path / "e.jsonl", [
        {"id": "a", "vector": [1.0] * 768},
        {"id": "b", "vector": [1.0] * 512},
    ])
    with pytest.raises(ExternalEmbeddingError, match="ragged embedding dimensions: id=b"):
        load_external_embeddings(path, {"a", "b"})


def test_external_embeddings_duplicate(tmp_path):
    path = _write_rows(tmp_path / "e.jsonl", [
        {"id": "a", "vector": [1.0, 0.0]},
        {"id": "a", "vector": [0.0, 1.0]},
    ])
    with pytest.raises(ExternalEmbeddingError, match="duplicate embedding for id=a"):
        load_external_embeddings(path, {"a"})


def test_saved_vectors_read_back(tmp_path):
    path = save_vectors(tmp_path / "v.jsonl", {"s_1": np.array([0.5, -0.25])})
    assert np.array_equal(read_vectors(path)["s_1"], [0.5, -0.25])


def test_pca_collinear_points():
    model = fit_pca(np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]), 1)
    component = model.components_array[0]
    assert np.allclose(component, [1 / math.sqrt(2), 1 / math.sqrt(2)])
    assert math.isclose(model.explained_variance[0], 2.0)
    assert math.isclose(model.explained_variance_ratio[0], 1.0)
    for x in (1.0, 2.0, 3.0):
        projected = project_pca(model, np.array([x, x]))
        assert math.isclose(projected[0], math.sqrt(2) * (x - 2), abs_tol=1e-12)


def test_pca_projects_mean_to_origin():
    points = np.array([[-1.0, 0.5], [1.0, 0.5], [-2.0, 0.5], [2.0, 0.5]])
    model = fit_pca(points, 1)
    assert np.allclose(project_pca(model, model.mean_array), 0.0)


def test_pca_matches_jacobi_oracle():
    data = np.random.default_rng(42).normal(size=(6, 3))
    model = fit_pca(data, 3)
    centered = data - data.mean(axis=0)
    expected = jacobi_eigenvalues(centered.T @ centered / 5)
    for got, want in zip(model.explained_variance, expected):
        assert math.isclose(got, want, rel_tol=1e-8)


def test_pca_wide_data_matches_jacobi_oracle():
    data = np.random.default_rng(7).normal(size=(4, 6))
    model = fit_pca(data, 3)
    centered = data - data.mean(axis=0)
    expected = jacobi_eigenvalues(centered.T @ centered / 3)[:3]
    for got, want in zip(model.explained_variance, expected):
        assert math.isclose(got, want, rel_tol=1e-8)
    components = model.components_array
    assert np.allclose(components @ components.T, np.eye(3), atol=1e-10)


def test_pca_components_are_sign_normalized():
    data = np.random.default_rng(3).normal(size=(10, 4))
    for row in fit_pca(data, 3).components_array:
        assert row[np.argmax(np.abs(row))] > 0


def test_pca_reconstructs_rank_deficient_data():
    data = np.array([[0.0, 1.0, 2.0], [1.0, 2.0, 3.0], [2.0, 3.0, 4.0], [5.0, 6.0, 7.0]])
    reducer = PcaReducer()
    model = reducer.fit(data, 2)
    assert model.explained_variance[1] == pytest.approx(0.0, abs=1e-10)
    rebuilt = reducer.reconstruct(model, reducer.project(model, data))
    assert np.allclose(rebuilt, data)


@pytest.mark.parametrize("k", [0, 3])
def test_pca_rejects_bad_k(k):
    with pytest.raises(ParameterError):
        fit_pca(np.eye(3), k)


def test_projection_dimension_mismatch():
    model = fit_pca(np.random.default_rng(0).normal(size=(5, 3)), 2)
    with pytest.raises(ParameterError):
        project_pca(model, np.zeros(4))
