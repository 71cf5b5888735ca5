import json
from pathlib import Path

import pandas as pd
import pytest

from wsdiag import __version__
from wsdiag.app.exceptions import MissingArtifactError, ParameterError, PipelineError, StaleArtifactError
from wsdiag.app.main import STAGES, PipelineRunner, stage_seed
from wsdiag.app.schemas.schemas import Corpus, PathsConfig, PipelineConfig
from wsdiag.routes.pipeline_cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main
from wsdiag.scrapers.letter_corpus import load_corpus, save_corpus

DEMO_CONFIG = Path(__file__).parent / "wsdiag" / "data" / "demo_config.json"


@pytest.fixture(scope="module")
def demo_run(tmp_path_factory):
    """The shipped demo configuration on weak labels, every stage including sensitivity."""
    runner = PipelineRunner(PipelineConfig.from_file(DEMO_CONFIG), tmp_path_factory.mktemp("demo"))
    runner.run_all()
    runner.run_stage("sensitivity")
    return runner


def test_stage_seeds_differ_per_stage():
    assert stage_seed(3, "synth") == stage_seed(3, "synth")
    assert stage_seed(3, "synth") != stage_seed(3, "train")
    assert stage_seed(3, "synth") != stage_seed(4, "synth")


def test_unchanged_stage_is_cached(pipeline_config):
    runner = PipelineRunner(pipeline_config)
    assert runner.run_stage("synth").status == "completed"
    assert runner.run_stage("extract").status == "completed"
    assert runner.run_stage("extract").status == "cached"

    changed = pipeline_config.model_copy(update={"extraction": pipeline_config.extraction.model_copy(
        update={"trim_keywords": ["controllo"]})})
    assert PipelineRunner(changed).run_stage("extract").status == "completed"


def test_missing_upstream_artifact(pipeline_config):
    with pytest.raises(MissingArtifactError) as info:
        PipelineRunner(pipeline_config).run_stage("embed")
    assert info.value.required_stage == "extract"
    assert "run stage 'extract' first" in str(info.value)
    assert str(info.value).startswith("[embed]")


def test_edited_artifact_is_stale(pipeline_config):
    runner = PipelineRunner(pipeline_config)
    runner.run_stage("synth")
    corpus = runner.store.path("corpus.jsonl")
    corpus.write_text(corpus.read_text(encoding="utf-8") + "\n", encoding="utf-8")
    with pytest.raises(StaleArtifactError):
        runner.run_stage("extract")


def test_unknown_stage(pipeline_config):
    with pytest.raises(PipelineError):
        PipelineRunner(pipeline_config).run_stage("deploy")


def test_ingested_corpus(tmp_path, pipeline_config, make_letter):
    source = save_corpus(Corpus(letters=(
        make_letter("A", "Diagnosi: bronchiolite"),
        make_letter("B", "Anamnesi muta."),
    )), tmp_path / "letters.jsonl")
    config = pipeline_config.model_copy(update={"paths": PathsConfig(corpus=source, output_dir=tmp_path / "ingest")})
    runner = PipelineRunner(config)
    runner.run_stage("synth")
    runner.run_stage("extract")
    extraction = runner.store.read_json("extraction.json")
    assert extraction == {"coverage": 0.5, "unique_strings": 1, "n_letters": 2, "n_sections": 1}


def test_run_all_on_gold_labels(pipeline_config):
    runner = PipelineRunner(pipeline_config)
    report = runner.run_all()
    assert report.label_source == "gold"
    assert len(report.folds) == 3
    assert "gold.f1" in report.summary

    manifest = runner.store.read_json("manifest.json")
    assert manifest["tool_version"] == __version__
    assert "output_dir" not in manifest["config"]["paths"]
    assert set(manifest["stages"]) == set(STAGES[:-1])
    assert all(s["status"] == "completed" for s in manifest["stages"].values())

    payload = runner.store.read_json("eval_report.json")
    assert payload["primary"] == "gold/with_diagnosis"
    assert set(payload["baselines"]) == {"full_text", "diagnosis_only"}
    for name in ("reduced.jsonl", "summaries.json", "weak_labels.csv", "model.json", "eval_report.txt",
                 "eval_folds.csv", "subgroup_report.json", "timings.json"):
        assert runner.store.exists(name)

    assert runner.run_stage("train").status == "cached"


def test_artifacts_reproducible_across_runs(tmp_path, pipeline_config):
    first, second = tmp_path / "a", tmp_path / "b"
    PipelineRunner(pipeline_config, first).run_all()
    PipelineRunner(pipeline_config, second).run_all()

    names = sorted(p.name for p in first.iterdir() if p.name != "timings.json")
    assert names == sorted(p.name for p in second.iterdir() if p.name != "timings.json")
    for name in names:
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


def test_output_dir_from_environment(tmp_path, monkeypatch, pipeline_config):
    monkeypatch.setenv("PIPELINE_OUT", str(tmp_path / "env"))
    assert PipelineRunner(pipeline_config).store.root == tmp_path / "env"
    assert PipelineRunner(pipeline_config, tmp_path / "flag").store.root == tmp_path / "flag"


def test_cli_runs_a_stage(config_file, capsys):
    assert main(["synth", "--config", str(config_file)]) == EXIT_OK
    assert capsys.readouterr().out.strip() == "synth: completed (1 artifacts)"
    assert main(["synth", "--config", str(config_file)]) == EXIT_OK
    assert capsys.readouterr().out.strip() == "synth: cached (1 artifacts)"


def test_cli_reports_stage_failure(config_file, capsys):
    assert main(["embed", "--config", str(config_file)]) == EXIT_FAILURE
    assert "[embed]" in capsys.readouterr().err


def test_cli_usage_errors(tmp_path, config_file, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"pca_dim": 0}), encoding="utf-8")
    assert main(["synth", "--config", str(bad)]) == EXIT_USAGE
    assert "invalid configuration" in capsys.readouterr().err

    assert main(["embed", "--config", str(config_file), "--embedder", "external"]) == EXIT_USAGE
    assert main(["deploy"]) == EXIT_USAGE
    assert main(["synth", "--config", str(tmp_path / "absent.json")]) == EXIT_USAGE


def test_cli_flags_override_config(tmp_path, config_file):
    out = tmp_path / "flagged"
    assert main(["synth", "--config", str(config_file), "--output", str(out), "--seed", "9"]) == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["config"]["seed"] == 9
    assert manifest["stages"]["synth"]["seed"] == stage_seed(9, "synth")


def test_unreadable_definitions_rejected_at_construction(tmp_path, pipeline_config):
    broken = tmp_path / "definitions.json"
    broken.write_text('[{"disease": ', encoding="utf-8")
    config = pipeline_config.model_copy(update={"paths": PathsConfig(definitions=broken, output_dir=tmp_path / "o")})
    with pytest.raises(ParameterError, match="cannot load"):
        PipelineRunner(config)


def test_cli_bad_lookup_files_are_usage_errors(tmp_path, config_file, capsys):
    definitions = tmp_path / "definitions.json"
    definitions.write_text('[{"disease": ', encoding="utf-8")
    assert main(["synth", "--config", str(config_file), "--definitions", str(definitions)]) == EXIT_USAGE
    err = capsys.readouterr().err
    assert err.startswith("invalid configuration:") and len(err.strip().splitlines()) == 1

    definitions.write_text(json.dumps([{"disease": "bronchiolite", "positive": []}]), encoding="utf-8")
    assert main(["synth", "--config", str(config_file), "--definitions", str(definitions)]) == EXIT_USAGE
    assert len(capsys.readouterr().err.strip().splitlines()) == 1

    abbreviations = tmp_path / "abbreviations.json"
    abbreviations.write_text(json.dumps({"troppolunga": "parola"}), encoding="utf-8")
    assert main(["synth", "--config", str(config_file), "--abbreviations", str(abbreviations)]) == EXIT_USAGE


def test_demo_weak_labels_recover_planted_disease(demo_run):
    corpus = load_corpus(demo_run.store.path("corpus.jsonl"))
    weak = pd.read_csv(demo_run.store.path("weak_labels.csv"), dtype={"letter_id": str})
    predicted = set(weak.loc[weak["weak_label"] == 1, "letter_id"])
    planted = {letter.id for letter in corpus.letters if letter.gold_label}

    assert len(planted) == 60
    hits = len(predicted & planted)
    assert hits / len(planted) >= 0.80
    assert hits / len(predicted) >= 0.70


def test_demo_second_level_loses_no_strings(demo_run):
    summaries = demo_run.store.read_json("summaries.json")
    level1, level2 = summaries["level1"], summaries["level2"]
    assert len(level2) <= len(level1)
    assert sorted(c for s in level2 for c in s["children"]) == [s["cluster_id"] for s in level1]
    assert (sorted(sid for s in level2 for sid in s["member_string_ids"])
            == sorted(sid for s in level1 for sid in s["member_string_ids"]))


def test_demo_weak_route_reaches_sensitivity(demo_run):
    selection = demo_run.store.read_json("selection.json")
    assert selection["selection"]["level"] == 2
    assert selection["selection"]["selected"] and selection["weak_positives"] > 0

    payload = demo_run.store.read_json("eval_report.json")
    assert payload["primary"] == "weak/with_diagnosis"
    assert {"weak/with_diagnosis", "gold/with_diagnosis"} <= set(payload["reports"])

    sensitivity = demo_run.store.read_json("sensitivity_report.json")
    assert sensitivity["exclusions"] or sensitivity["note"]
    text = demo_run.store.path("sensitivity_report.txt").read_text(encoding="utf-8")
    assert "All selected clusters" in text
    manifest = demo_run.store.read_json("manifest.json")
    assert {stage: s["status"] for stage, s in manifest["stages"].items()} == {s: "completed" for s in STAGES}
