"""Stage runner for the weak-supervision pipeline.

Each stage reads the artifacts of the stages it depends on from the output
directory, writes its own, and records checksums in manifest.json. A stage
whose configuration and inputs are unchanged is reported as cached.
"""
import hashlib
import json
import logging
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import ValidationError

from wsdiag import __version__
from wsdiag.app.agents.diagnosis_clusterer import DiagnosisClusterer, dump_condensed_tree
from wsdiag.app.agents.evaluator import (
    Evaluator,
    render_table,
    write_folds_csv,
    write_report_json,
)
from wsdiag.app.agents.keyword_summarizer import KeywordSummarizer, write_cluster_report
from wsdiag.app.agents.letter_classifier import LetterClassifier
from wsdiag.app.agents.weak_labeler import (
    WeakLabeler,
    cluster_membership,
    export_weak_labels,
    load_definitions,
    read_weak_labels,
)
from wsdiag.app.db.database import ArtifactStore, canonical_json, resolve_output_dir, sha256_file
from wsdiag.app.exceptions import (
    MissingArtifactError,
    ParameterError,
    PipelineError,
    StaleArtifactError,
    WsdiagError,
)
from wsdiag.app.models.models import RunManifest, StageRecord
from wsdiag.app.schemas.schemas import (
    ClusterAssignment,
    ClusterSelection,
    ClusterSummary,
    Corpus,
    EvalReport,
    ExtractionResult,
    ExtractionRules,
    PipelineConfig,
    SensitivityReport,
)
from wsdiag.scrapers.diagnosis_scraper import (
    DiagnosisScraper,
    read_diagnoses_csv,
    string_id,
    write_diagnoses_csv,
)
from wsdiag.scrapers.letter_corpus import load_corpus, save_corpus
from wsdiag.scrapers.synthetic_letters import generate_synthetic
from wsdiag.scrapers.text_normalizer import TextNormalizer, load_abbreviations, token_string
from wsdiag.vector_store.embeddings import (
    HashedNgramEmbedder,
    load_external_embeddings,
    save_vectors,
)
from wsdiag.vector_store.pca import PcaReducer

logger = logging.getLogger(__name__)

STAGES = ["synth", "extract", "embed", "cluster", "keywords", "label", "train", "evaluate", "sensitivity"]

PRODUCED_BY = {
    "corpus.jsonl": "synth",
    "diagnoses.csv": "extract",
    "extraction.json": "extract",
    "string_embeddings.jsonl": "embed",
    "reduced.jsonl": "embed",
    "pca_model.json": "embed",
    "clusters_level1.csv": "cluster",
    "condensed_tree.csv": "cluster",
    "summaries.json": "keywords",
    "cluster_report.csv": "keywords",
    "weak_labels.csv": "label",
    "selection.json": "label",
    "model.json": "train",
}

_EXTRACTION = ["corpus.jsonl", "diagnoses.csv", "extraction.json"]
_LABELS = _EXTRACTION + ["weak_labels.csv", "selection.json"]

REQUIRES: Dict[str, List[str]] = {
    "synth": [],
    "extract": ["corpus.jsonl"],
    "embed": ["diagnoses.csv", "extraction.json"],
    "cluster": ["reduced.jsonl"],
    "keywords": ["clusters_level1.csv", "diagnoses.csv", "extraction.json"],
    "label": _EXTRACTION + ["summaries.json"],
    "train": _LABELS,
    "evaluate": _LABELS,
    "sensitivity": _LABELS + ["summaries.json"],
}


def stage_seed(seed: int, stage: str) -> int:
    return int(hashlib.sha256(f"{seed}:{stage}".encode("utf-8")).hexdigest()[:8], 16)


class PipelineRunner:
    """
    Runs pipeline stages against one output directory.
    """

    def __init__(self, config: PipelineConfig, output_dir: Optional[Path] = None):
        self.config = config
        self.store = ArtifactStore(output_dir or resolve_output_dir(config.paths.output_dir))
        paths = config.paths
        try:
            self.abbreviations = load_abbreviations(paths.abbreviations)
            self.definitions = load_definitions(paths.definitions)
            self.rules = ExtractionRules.from_file(paths.rules) if paths.rules else config.extraction
        except (ValidationError, ValueError, OSError) as e:
            # JSONDecodeError is a ValueError
            detail = " ".join(str(e).split()) or type(e).__name__
            raise ParameterError(f"cannot load rules, abbreviations or definitions: {detail}") from e
        self.normalizer = TextNormalizer(self.abbreviations)
        self.handlers: Dict[str, Callable[[int], List[str]]] = {
            "synth": self._run_synth,
            "extract": self._run_extract,
            "embed": self._run_embed,
            "cluster": self._run_cluster,
            "keywords": self._run_keywords,
            "label": self._run_label,
            "train": self._run_train,
            "evaluate": self._run_evaluate,
            "sensitivity": self._run_sensitivity,
        }

    # -- orchestration -----------------------------------------------------

    def run_stage(self, stage: str) -> StageRecord:
        if stage not in self.handlers:
            raise PipelineError(stage, f"unknown stage; choose from {', '.join(STAGES)}")
        manifest = self.store.load_manifest() or RunManifest(tool_version=__version__, config={})
        manifest.tool_version = __version__
        manifest.config = self.config.snapshot()

        inputs = self._check_inputs(stage, manifest)
        seed = stage_seed(self.config.seed, stage)
        fingerprint = self._fingerprint(stage, inputs, seed)

        previous = manifest.stages.get(stage)
        if previous is not None and previous.fingerprint == fingerprint and self._artifacts_intact(previous):
            logger.info("Stage %s unchanged, using cached artifacts", stage)
            record = previous.model_copy(update={"status": "cached"})
        else:
            logger.info("Stage %s started", stage)
            started = time.perf_counter()
            try:
                written = self.handlers[stage](seed)
            except PipelineError:
                raise
            except (WsdiagError, ValidationError, ValueError, OSError, KeyError) as e:
                raise PipelineError(stage, str(e)) from e
            self.store.record_timing(stage, time.perf_counter() - started)
            record = StageRecord(
                fingerprint=fingerprint,
                seed=seed,
                status="completed",
                inputs=inputs,
                artifacts={name: self.store.checksum(name) for name in sorted(written)},
            )
            logger.info("Stage %s completed: %s", stage, ", ".join(sorted(written)))

        manifest.stages[stage] = record
        self.store.save_manifest(manifest)
        return record

    def run_all(self) -> EvalReport:
        for stage in STAGES[:-1]:
            self.run_stage(stage)
        payload = self.store.read_json("eval_report.json")
        return EvalReport.model_validate(payload["reports"][payload["primary"]])

    def _check_inputs(self, stage: str, manifest: RunManifest) -> Dict[str, str]:
        inputs = {}
        for name in REQUIRES[stage]:
            producer = PRODUCED_BY[name]
            if not self.store.exists(name):
                raise MissingArtifactError(stage, producer, name)
            checksum = self.store.checksum(name)
            recorded = manifest.stages.get(producer)
            if recorded is not None and name in recorded.artifacts and recorded.artifacts[name] != checksum:
                raise StaleArtifactError(stage, name)
            inputs[name] = checksum
        return inputs

    def _artifacts_intact(self, record: StageRecord) -> bool:
        return all(
            self.store.exists(name) and self.store.checksum(name) == checksum
            for name, checksum in record.artifacts.items()
        )

    def _fingerprint(self, stage: str, inputs: Dict[str, str], seed: int) -> str:
        payload = {"stage": stage, "seed": seed, "inputs": inputs, "config": self._stage_config(stage),
                   "version": __version__}
        return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()

    def _stage_config(self, stage: str) -> dict:
        cfg = self.config
        text_config = {"abbreviations": dict(sorted(self.abbreviations.entries.items()))}
        sections = {
            "synth": {"synthesis": cfg.synthesis.model_dump(mode="json"),
                      "corpus": sha256_file(cfg.paths.corpus) if cfg.paths.corpus else None},
            "extract": {"extraction": self.rules.model_dump(mode="json")},
            "embed": {**text_config, "embedder": cfg.embedder.model_dump(mode="json"), "pca_dim": cfg.pca_dim,
                      "external": sha256_file(cfg.paths.external_embeddings)
                      if cfg.embedder.provider == "external_file" else None},
            "cluster": {"hdbscan": cfg.hdbscan_level1.model_dump(mode="json")},
            "keywords": {**text_config, "keywords": cfg.keywords.model_dump(mode="json"),
                         "hdbscan": cfg.hdbscan_level2.model_dump(mode="json"),
                         "embedder": cfg.embedder.model_dump(mode="json"), "pca_dim": cfg.pca_dim},
            "label": {"definitions": [d.model_dump(mode="json") for d in self.definitions],
                      "selection_level": cfg.selection_level},
        }
        model_config = {"train": cfg.train.model_dump(mode="json"),
                        "evaluation": cfg.evaluation.model_dump(mode="json"),
                        "embedder": cfg.embedder.model_dump(mode="json"), "pca_dim": cfg.pca_dim}
        return sections.get(stage, model_config)

    # -- artifact readers --------------------------------------------------

    def _corpus(self) -> Corpus:
        return load_corpus(self.store.path("corpus.jsonl"))

    def _extraction(self) -> ExtractionResult:
        n_letters = self.store.read_json("extraction.json")["n_letters"]
        return read_diagnoses_csv(self.store.path("diagnoses.csv"), n_letters)

    def _string_tokens(self, extraction: ExtractionResult) -> Dict[str, List[str]]:
        trimmed = {string_id(d.trimmed): d.trimmed for d in extraction.diagnoses.values() if d.trimmed}
        return {sid: self.normalizer.normalize(trimmed[sid]) for sid in sorted(trimmed)}

    def _summaries(self) -> Dict[int, List[ClusterSummary]]:
        payload = self.store.read_json("summaries.json")
        return {level: [ClusterSummary.model_validate(s) for s in payload[f"level{level}"]] for level in (1, 2)}

    def _labels(self, extraction: ExtractionResult):
        payload = self.store.read_json("selection.json")
        selection = ClusterSelection.model_validate(payload["selection"])
        return selection, read_weak_labels(self.store.path("weak_labels.csv"), selection,
                                           self.definitions, extraction.diagnoses)

    def _evaluator(self, seed: int) -> Tuple[Evaluator, ClusterSelection]:
        corpus = self._corpus()
        extraction = self._extraction()
        selection, weak = self._labels(extraction)
        train_config = self.config.train.model_copy(update={"seed": seed})
        settings = {"pca_dim": self.config.pca_dim, "selection_level": selection.level,
                    "embedder_dim": self.config.embedder.dim}
        evaluator = Evaluator(corpus, extraction.diagnoses, weak, train_config, self.config.embedder, settings)
        return evaluator, selection

    # -- stages ------------------------------------------------------------

    def _run_synth(self, seed: int) -> List[str]:
        if self.config.paths.corpus is not None:
            corpus = load_corpus(self.config.paths.corpus)
        else:
            corpus = generate_synthetic(self.config.synthesis, seed)
        save_corpus(corpus, self.store.path("corpus.jsonl"))
        return ["corpus.jsonl"]

    def _run_extract(self, seed: int) -> List[str]:
        result = DiagnosisScraper(self.rules).extract_all(self._corpus())
        write_diagnoses_csv(result, self.store.path("diagnoses.csv"))
        self.store.write_json("extraction.json", {
            "coverage": result.coverage,
            "unique_strings": result.unique_strings,
            "n_letters": result.n_letters,
            "n_sections": len(result.diagnoses),
        })
        return ["diagnoses.csv", "extraction.json"]

    def _run_embed(self, seed: int) -> List[str]:
        string_tokens = self._string_tokens(self._extraction())
        points: Dict[str, List[str]] = {}
        for sid, tokens in string_tokens.items():
            if tokens:
                points.setdefault(token_string(tokens), []).append(sid)
        keys = sorted(points)

        if self.config.embedder.provider == "external_file":
            external = load_external_embeddings(self.config.paths.external_embeddings, string_tokens.keys())
            string_vectors = {sid: external[sid].values for sid in string_tokens}
            point_vectors = [external[points[key][0]] for key in keys]
        else:
            embedder = HashedNgramEmbedder(self.config.embedder)
            string_vectors = {sid: embedder.embed(tokens).values for sid, tokens in string_tokens.items()}
            point_vectors = [embedder.embed(string_tokens[points[key][0]]) for key in keys]

        kept = [(key, v) for key, v in zip(keys, point_vectors) if not v.degenerate]
        if len(kept) < 2:
            raise PipelineError("embed", f"need at least 2 non-degenerate diagnosis strings, got {len(kept)}")
        matrix = np.vstack([v.values for _, v in kept])
        k = min(self.config.pca_dim, len(kept) - 1, matrix.shape[1])
        if k < self.config.pca_dim:
            logger.warning("PCA dimension reduced from %d to %d for %d points", self.config.pca_dim, k, len(kept))
        reducer = PcaReducer()
        model = reducer.fit(matrix, k)
        reduced = reducer.project(model, matrix)

        save_vectors(self.store.path("string_embeddings.jsonl"), string_vectors)
        with self.store.path("reduced.jsonl").open("w", encoding="utf-8", newline="\n") as handle:
            for index, ((key, _), row) in enumerate(zip(kept, reduced)):
                handle.write(json.dumps({"id": f"p_{index:05d}", "members": points[key],
                                         "vector": [float(x) for x in row]}) + "\n")
        self.store.write_json("pca_model.json", model.model_dump(mode="json"))
        return ["string_embeddings.jsonl", "reduced.jsonl", "pca_model.json"]

    def _read_reduced(self):
        rows = []
        with self.store.path("reduced.jsonl").open(encoding="utf-8") as handle:
            for line in handle:
                if line.strip():
                    rows.append(json.loads(line))
        return rows

    def _run_cluster(self, seed: int) -> List[str]:
        rows = self._read_reduced()
        points = np.array([row["vector"] for row in rows], dtype=float)
        clusterer = DiagnosisClusterer(self.config.hdbscan_level1)
        assignment = clusterer.cluster(points)
        table = [
            {"point_id": row["id"], "string_id": sid, "label": label, "probability": prob}
            for row, label, prob in zip(rows, assignment.labels, assignment.probabilities)
            for sid in row["members"]
        ]
        pd.DataFrame(table, columns=["point_id", "string_id", "label", "probability"]).to_csv(
            self.store.path("clusters_level1.csv"), index=False, lineterminator="\n"
        )
        dump_condensed_tree(clusterer.condensed_tree, self.store.path("condensed_tree.csv"))
        return ["clusters_level1.csv", "condensed_tree.csv"]

    def _run_keywords(self, seed: int) -> List[str]:
        frame = pd.read_csv(self.store.path("clusters_level1.csv"), dtype={"point_id": str, "string_id": str})
        point_ids = list(dict.fromkeys(frame["point_id"]))
        first = frame.drop_duplicates("point_id").set_index("point_id")
        labels = [int(first.loc[p, "label"]) for p in point_ids]
        assignment = ClusterAssignment(
            labels=labels,
            probabilities=[float(first.loc[p, "probability"]) for p in point_ids],
            n_clusters=max(labels, default=-1) + 1,
        )
        members = frame.groupby("point_id", sort=False)["string_id"].apply(list)
        point_string_ids = [members[p] for p in point_ids]

        summarizer = KeywordSummarizer(self._string_tokens(self._extraction()), self.config.keywords)
        level1 = summarizer.summarize(assignment, point_string_ids)
        level2 = summarizer.second_level_merge(level1, self.config.embedder, self.config.pca_dim,
                                               self.config.hdbscan_level2)
        self.store.write_json("summaries.json", {
            "level1": [s.model_dump(mode="json") for s in level1],
            "level2": [s.model_dump(mode="json") for s in level2],
        })
        write_cluster_report(level1 + level2, self.store.path("cluster_report.csv"))
        return ["summaries.json", "cluster_report.csv"]

    def _run_label(self, seed: int) -> List[str]:
        summaries = self._summaries()[self.config.selection_level]
        labeler = WeakLabeler(self.definitions)
        selection = labeler.select(summaries)
        weak = labeler.assign(self._corpus(), self._extraction(), cluster_membership(summaries), selection)
        if not selection.selected:
            logger.warning("Empty cluster selection: every weak label is 0")
        export_weak_labels(weak, self.store.path("weak_labels.csv"))
        self.store.write_json("selection.json", {
            "selection": selection.model_dump(mode="json"),
            "definitions": [d.model_dump(mode="json") for d in self.definitions],
            "weak_positives": weak.n_positive,
        })
        return ["weak_labels.csv", "selection.json"]

    def _run_train(self, seed: int) -> List[str]:
        evaluator, _ = self._evaluator(seed)
        source = self.config.evaluation.labels
        variant = self.config.evaluation.variant(self.config.evaluation.variants[0])
        labels = evaluator.training_labels(source)
        classifier = LetterClassifier(evaluator.train_config)
        model = classifier.train(evaluator.corpus, labels, evaluator.diagnoses, evaluator.featurizer(variant), source)
        self.store.write_json("model.json", model.model_dump(mode="json"))
        return ["model.json"]

    def _run_evaluate(self, seed: int) -> List[str]:
        evaluation = self.config.evaluation
        evaluator, _ = self._evaluator(seed)
        has_gold = bool(evaluator.gold)
        reports: Dict[str, EvalReport] = {}
        rows = []
        for mode in evaluation.variants:
            variant = evaluation.variant(mode)
            label = mode.replace("_", " ")
            key = f"{evaluation.labels}/{mode}"
            reports[key] = evaluator.run_cv(evaluation.labels, variant, evaluation.k, seed)
            name = "Weakly-supervised" if evaluation.labels == "weak" else "Supervised"
            rows.append((f"{name} ({label})", reports[key]))
            if evaluation.compare_supervised and evaluation.labels == "weak" and has_gold:
                reports[f"gold/{mode}"] = evaluator.run_cv("gold", variant, evaluation.k, seed)
                rows.append((f"Supervised ({label})", reports[f"gold/{mode}"]))

        primary_variant = evaluation.variant(evaluation.variants[0])
        baselines = {
            scope: evaluator.evaluate_rule_baseline(scope, evaluation.rule_term, primary_variant)
            for scope in ("full_text", "diagnosis_only")
        }
        rows.extend((b.name, b) for b in baselines.values())

        self.store.write_json("eval_report.json", {
            "primary": f"{evaluation.labels}/{evaluation.variants[0]}",
            "reports": {key: r.model_dump(mode="json") for key, r in reports.items()},
            "baselines": {scope: b.model_dump(mode="json") for scope, b in baselines.items()},
        })
        self.store.write_text("eval_report.txt", render_table(rows, self.config.train.threshold, self.config.pca_dim))
        write_folds_csv(list(reports.items()), self.store.path("eval_folds.csv"))
        written = ["eval_report.json", "eval_report.txt", "eval_folds.csv"]

        if evaluation.run_subgroup:
            subgroup = evaluator.run_subgroup(evaluation.labels, primary_variant, evaluation.k, seed)
            write_report_json(subgroup, self.store.path("subgroup_report.json"))
            written.append("subgroup_report.json")
        if evaluation.run_logo:
            logo = evaluator.run_logo(evaluation.labels, primary_variant, evaluation.logo_group_by,
                                      evaluation.logo_min_positives)
            write_report_json(logo, self.store.path("logo_report.json"))
            written.append("logo_report.json")
        return written

    def _run_sensitivity(self, seed: int) -> List[str]:
        evaluation = self.config.evaluation
        evaluator, selection = self._evaluator(seed)
        summaries = self._summaries()
        selected = [s for s in summaries[selection.level] if s.cluster_id in selection.selected]
        if selection.level == 2:
            children = sorted({c for s in selected for c in s.children})
            by_id = {s.cluster_id: s for s in summaries[1]}
            excluded = [by_id[c] for c in children if c in by_id]
        else:
            excluded = selected

        variant = evaluation.variant(evaluation.variants[0])
        if len(excluded) >= 2:
            report = evaluator.cluster_sensitivity(excluded, variant, evaluation.k, seed)
        else:
            note = f"{len(excluded)} level-1 cluster(s) selected, nothing to exclude"
            logger.warning("Sensitivity analysis skipped: %s", note)
            report = SensitivityReport(baseline=evaluator.run_cv("weak", variant, evaluation.k, seed),
                                       exclusions=[], note=note)
        write_report_json(report, self.store.path("sensitivity_report.json"))
        rows = [("All selected clusters", report.baseline)]
        rows.extend((f"Without level-1 cluster #{e.excluded_cluster}", e.report) for e in report.exclusions)
        table = render_table(rows, self.config.train.threshold, self.config.pca_dim)
        self.store.write_text("sensitivity_report.txt", table if report.note is None else f"{report.note}\n{table}")
        return ["sensitivity_report.json", "sensitivity_report.txt"]


def run_stage(stage: str, config: PipelineConfig, output_dir: Optional[Path] = None) -> StageRecord:
    return PipelineRunner(config, output_dir).run_stage(stage)


def run_all(config: PipelineConfig, output_dir: Optional[Path] = None) -> EvalReport:
    return PipelineRunner(config, output_dir).run_all()
