import json

import pytest

from wsdiag.app.schemas.schemas import (
    EmbedderConfig,
    EvaluationConfig,
    HdbscanParams,
    Letter,
    PathsConfig,
    PipelineConfig,
    SynthesisConfig,
    TrainConfig,
)


@pytest.fixture(autouse=True)
def _no_output_override(monkeypatch):
    monkeypatch.delenv("PIPELINE_OUT", raising=False)


@pytest.fixture
def make_letter():
    def _make(letter_id, text, **fields):
        return Letter(id=letter_id, text=text, **fields)
    return _make


@pytest.fixture
def small_synthesis():
    return SynthesisConfig(n_letters=120, target_prevalence=0.1, diagnosis_section_rate=1.0)


@pytest.fixture
def pipeline_config(tmp_path):
    """Small end-to-end configuration trained on gold labels."""
    return PipelineConfig(
        seed=3,
        paths=PathsConfig(output_dir=tmp_path / "out"),
        synthesis=SynthesisConfig(n_letters=240, target_prevalence=0.1),
        embedder=EmbedderConfig(dim=128),
        pca_dim=8,
        hdbscan_level1=HdbscanParams(min_cluster_size=3),
        train=TrainConfig(epochs=3),
        evaluation=EvaluationConfig(k=3, labels="gold", compare_supervised=False),
    )


@pytest.fixture
def config_file(tmp_path, pipeline_config):
    path = tmp_path / "config.json"
    data = pipeline_config.model_dump(mode="json")
    data["paths"] = {"output_dir": str(tmp_path / "cli_out")}
    path.write_text(json.dumps(data), encoding="utf-8")
    return path
