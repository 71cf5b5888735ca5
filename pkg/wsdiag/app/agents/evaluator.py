"""Evaluation harness: metrics, stratified cross-validation, leave-one-group-out,
pediatric subgroups, cluster-exclusion sensitivity and rule baselines."""
import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from wsdiag.app.agents.letter_classifier import LetterClassifier, LetterFeaturizer, rule_classify
from wsdiag.app.exceptions import MetricError, ParameterError, TrainingError
from wsdiag.app.schemas.schemas import (
    UNKNOWN_GROUP,
    BaselineResult,
    ClusterSummary,
    Corpus,
    DiagnosisString,
    EmbedderConfig,
    EvalReport,
    FoldPlan,
    FoldResult,
    InputVariant,
    LogoReport,
    Metrics,
    MetricSummary,
    SensitivityEntry,
    SensitivityReport,
    SubgroupReport,
    TrainConfig,
    WeakLabelSet,
)

logger = logging.getLogger(__name__)

METRIC_NAMES = ("precision", "recall", "f1", "auc")


def f1_from_pr(precision: float, recall: float) -> float:
    if precision + recall <= 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def prf1(predictions: Sequence[bool], labels: Sequence[bool]) -> Metrics:
    if len(predictions) != len(labels):
        raise MetricError(f"length mismatch: {len(predictions)} predictions, {len(labels)} labels")
    pred = np.asarray(predictions, dtype=bool)
    gold = np.asarray(labels, dtype=bool)
    tp = int(np.sum(pred & gold))
    fp = int(np.sum(pred & ~gold))
    fn = int(np.sum(~pred & gold))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return Metrics(
        precision=precision,
        recall=recall,
        f1=f1_from_pr(precision, recall),
        support=int(gold.sum()),
        n=len(gold),
    )


def roc_auc(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """Mann-Whitney statistic with average ranks, so tied pairs count one half."""
    gold = np.asarray(labels, dtype=bool)
    if len(scores) != len(gold):
        raise MetricError(f"length mismatch: {len(scores)} scores, {len(gold)} labels")
    n_pos = int(gold.sum())
    n_neg = len(gold) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs at least one positive and one negative label")
    ranks = pd.Series(np.asarray(scores, dtype=float)).rank(method="average").to_numpy()
    u = ranks[gold].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def stratified_folds(labels: Mapping[str, int], k: int, seed: int, stratify_on: str = "weak") -> FoldPlan:
    ids = list(labels)
    if k < 2:
        raise ParameterError("need at least 2 folds")
    if k > len(ids):
        raise ParameterError(f"k={k} folds for only {len(ids)} letters")
    rng = np.random.default_rng(seed)
    positives = [ids[i] for i in rng.permutation([j for j, x in enumerate(ids) if labels[x]])]
    negatives = [ids[i] for i in rng.permutation([j for j, x in enumerate(ids) if not labels[x]])]

    assignment = {}
    for i, letter_id in enumerate(positives):
        assignment[letter_id] = i % k
    offset = len(positives)
    for j, letter_id in enumerate(negatives):
        assignment[letter_id] = (offset + j) % k
    return FoldPlan(k=k, assignment={i: assignment[i] for i in ids}, seed=seed, stratify_on=stratify_on)


def summarize_folds(folds: Sequence[FoldResult]) -> Dict[str, MetricSummary]:
    summary = {}
    for source in ("weak", "gold"):
        for name in METRIC_NAMES:
            values = []
            for fold in folds:
                metrics = getattr(fold, source)
                if fold.skipped or metrics is None:
                    continue
                value = getattr(metrics, name)
                if value is not None:
                    values.append(value)
            if not values:
                continue
            mean = math.fsum(values) / len(values)
            std = math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (len(values) - 1)) if len(values) > 1 else 0.0
            summary[f"{source}.{name}"] = MetricSummary(mean=mean, std=std, n=len(values))
    return summary


def _score_metrics(scores: Mapping[str, float], truth: Mapping[str, int], threshold: float) -> Optional[Metrics]:
    ids = [i for i in scores if truth.get(i) is not None]
    if not ids:
        return None
    y = [bool(truth[i]) for i in ids]
    s = [scores[i] for i in ids]
    metrics = prf1([v >= threshold for v in s], y)
    auc = roc_auc(s, y) if 0 < sum(y) < len(y) else None
    return metrics.model_copy(update={"auc": auc})


class Evaluator:
    """
    Trains the letter classifier on fold splits and scores the held-out letters
    against weak and gold labels.
    """

    def __init__(self, corpus: Corpus, diagnoses: Mapping[str, DiagnosisString], weak: WeakLabelSet,
                 train_config: Optional[TrainConfig] = None, embedder: Optional[EmbedderConfig] = None,
                 settings: Optional[dict] = None):
        self.corpus = corpus
        self.diagnoses = diagnoses
        self.weak = weak
        self.train_config = train_config or TrainConfig()
        self.embedder = embedder or EmbedderConfig()
        self.settings = dict(settings or {})
        self.gold = {l.id: int(l.gold_label) for l in corpus.letters if l.gold_label is not None}
        self._featurizers: Dict[InputVariant, LetterFeaturizer] = {}

    def featurizer(self, variant: InputVariant) -> LetterFeaturizer:
        if variant not in self._featurizers:
            self._featurizers[variant] = LetterFeaturizer(self.embedder, variant)
        return self._featurizers[variant]

    def training_labels(self, source: str, weak: Optional[WeakLabelSet] = None) -> Dict[str, int]:
        if source == "weak":
            return dict((weak or self.weak).labels)
        missing = [l.id for l in self.corpus.letters if l.id not in self.gold]
        if missing:
            raise ParameterError(f"gold labels requested but missing for {len(missing)} letters (e.g. {missing[0]})")
        return dict(self.gold)

    def _train_and_score(self, train_ids: Sequence[str], test_ids: Sequence[str], labels: Mapping[str, int],
                         variant: InputVariant, source: str) -> Dict[str, float]:
        featurizer = self.featurizer(variant)
        classifier = LetterClassifier(self.train_config)
        model = classifier.train(self.corpus.subset(train_ids), labels, self.diagnoses, featurizer, source)
        return {
            i: classifier.predict_proba(model, self.corpus.get(i), self.diagnoses.get(i), featurizer)
            for i in test_ids
        }

    def fold_scores(self, plan: FoldPlan, labels: Mapping[str, int], variant: InputVariant,
                    source: str) -> List[Tuple[int, Optional[Dict[str, float]], Optional[str]]]:
        results = []
        for fold in range(plan.k):
            test_ids = plan.test_ids(fold)
            train_ids = [i for i, f in plan.assignment.items() if f != fold]
            try:
                scores = self._train_and_score(train_ids, test_ids, labels, variant, source)
                results.append((fold, scores, None))
            except TrainingError as e:
                logger.warning("Fold %d skipped: %s", fold, e)
                results.append((fold, None, str(e)))
        return results

    def _fold_result(self, fold: int, scores: Optional[Dict[str, float]], note: Optional[str],
                     test_ids: Sequence[str], weak_truth: Optional[Mapping[str, int]]) -> FoldResult:
        if scores is None:
            return FoldResult(fold=fold, n_test=len(test_ids), skipped=True, note=note)
        if not test_ids:
            return FoldResult(fold=fold, n_test=0, skipped=True, note="empty test set")
        subset = {i: scores[i] for i in test_ids}
        threshold = self.train_config.threshold
        result = FoldResult(
            fold=fold,
            n_test=len(test_ids),
            weak=_score_metrics(subset, weak_truth, threshold) if weak_truth is not None else None,
            gold=_score_metrics(subset, self.gold, threshold) if self.gold else None,
        )
        flagged = [src for src in ("weak", "gold") if getattr(result, src) is not None and getattr(result, src).support == 0]
        if flagged:
            result = result.model_copy(update={"note": f"no positives for {', '.join(flagged)} labels"})
        return result

    def _report(self, source: str, variant: InputVariant, folds: List[FoldResult], **extra) -> EvalReport:
        settings = {
            **self.settings,
            "labels": source,
            "variant": variant.mode,
            "input_mode": variant.input_mode,
            "max_tokens": variant.max_tokens,
            "threshold": self.train_config.threshold,
            "train_config": self.train_config.model_dump(mode="json"),
            **extra,
        }
        return EvalReport(label_source=source, variant=variant, folds=folds,
                          summary=summarize_folds(folds), settings=settings)

    def run_cv(self, source: str, variant: InputVariant, k: int = 10, seed: int = 0,
               weak: Optional[WeakLabelSet] = None) -> EvalReport:
        labels = self.training_labels(source, weak)
        plan = stratified_folds(labels, k, seed, stratify_on=source)
        weak_truth = (weak or self.weak).labels if source == "weak" else None
        folds = [
            self._fold_result(fold, scores, note, plan.test_ids(fold), weak_truth)
            for fold, scores, note in self.fold_scores(plan, labels, variant, source)
        ]
        report = self._report(source, variant, folds, k=k, seed=seed)
        logger.info("CV (%s labels, %s): %s", source, variant.mode, _headline(report))
        return report

    def run_subgroup(self, source: str, variant: InputVariant, k: int = 10, seed: int = 0) -> SubgroupReport:
        labels = self.training_labels(source)
        plan = stratified_folds(labels, k, seed, stratify_on=source)
        weak_truth = self.weak.labels if source == "weak" else None
        pediatric, other = [], []
        for fold, scores, note in self.fold_scores(plan, labels, variant, source):
            test_ids = plan.test_ids(fold)
            ped_ids = [i for i in test_ids if self.corpus.get(i).is_pediatric]
            non_ids = [i for i in test_ids if not self.corpus.get(i).is_pediatric]
            pediatric.append(self._fold_result(fold, scores, note, ped_ids, weak_truth))
            other.append(self._fold_result(fold, scores, note, non_ids, weak_truth))
        return SubgroupReport(
            pediatric=self._report(source, variant, pediatric, k=k, seed=seed, subgroup="pediatric"),
            non_pediatric=self._report(source, variant, other, k=k, seed=seed, subgroup="non_pediatric"),
        )

    def run_logo(self, source: str, variant: InputVariant, group_by: str = "hospital",
                 min_positives: int = 15) -> LogoReport:
        labels = self.training_labels(source)
        key = "hospital_id" if group_by == "hospital" else "lhu_id"
        count_source = "gold" if self.gold else "weak"
        counting = self.gold if self.gold else self.weak.labels

        members: Dict[str, List[str]] = {}
        for letter in self.corpus.letters:
            members.setdefault(getattr(letter, key), []).append(letter.id)
        members.pop(UNKNOWN_GROUP, None)

        retained, excluded = [], {}
        for group in sorted(members):
            positives = sum(counting.get(i, 0) for i in members[group])
            if positives >= min_positives:
                retained.append(group)
            else:
                excluded[group] = positives
        if len(retained) < 2:
            raise ParameterError(
                f"leave-one-group-out needs at least 2 {group_by} groups with >= {min_positives} positives, "
                f"found {len(retained)}"
            )
        if excluded:
            logger.info("LOGO excluded groups: %s", excluded)

        weak_truth = self.weak.labels if source == "weak" else None
        groups = {}
        for group in retained:
            test_ids = members[group]
            held_out = set(test_ids)
            train_ids = [i for i in self.corpus.ids if i not in held_out]
            try:
                scores, note = self._train_and_score(train_ids, test_ids, labels, variant, source), None
            except TrainingError as e:
                scores, note = None, str(e)
            fold = self._fold_result(0, scores, note, test_ids, weak_truth)
            groups[group] = self._report(source, variant, [fold], group_by=group_by, group=group)
        return LogoReport(group_by=group_by, min_positives=min_positives, positives_source=count_source,
                          groups=groups, excluded=excluded)

    def cluster_sensitivity(self, excluded_clusters: Sequence[ClusterSummary], variant: InputVariant,
                            k: int = 10, seed: int = 0) -> SensitivityReport:
        """
        Re-run weakly-supervised CV once per selected first-level cluster, with that cluster's
        letters relabelled negative.
        """
        if len(excluded_clusters) < 2:
            raise ParameterError("sensitivity analysis needs at least 2 selected clusters")
        baseline = self.run_cv("weak", variant, k, seed)
        entries = []
        for summary in excluded_clusters:
            if self.weak.level == summary.level:
                reduced = self.weak.without_clusters([summary.cluster_id])
            else:
                reduced = self.weak.without_strings(summary.member_string_ids)
            report = self.run_cv("weak", variant, k, seed, weak=reduced)
            entries.append(SensitivityEntry(excluded_cluster=summary.cluster_id,
                                            weak_positives=reduced.n_positive, report=report))
        return SensitivityReport(baseline=baseline, exclusions=entries)

    def evaluate_rule_baseline(self, scope: str, term: str, variant: InputVariant) -> BaselineResult:
        full_text = InputVariant(mode=variant.mode, input_mode="chunk", max_tokens=variant.max_tokens)
        predictions = {
            l.id: rule_classify(l, self.diagnoses.get(l.id), scope, term, full_text)
            for l in self.corpus.letters
        }

        def against(truth: Mapping[str, int]) -> Optional[Metrics]:
            ids = [i for i in predictions if i in truth]
            if not ids:
                return None
            return prf1([predictions[i] for i in ids], [bool(truth[i]) for i in ids])

        name = "RB-full" if scope == "full_text" else "RB-diagnosis"
        return BaselineResult(name=name, scope=scope, variant=variant,
                              weak=against(self.weak.labels), gold=against(self.gold))


def _headline(report: EvalReport) -> str:
    parts = [f"{key}={value.mean:.4f}" for key, value in sorted(report.summary.items()) if key.endswith("f1")]
    return ", ".join(parts) or "no completed folds"


def run_cv(corpus: Corpus, diagnoses: Mapping[str, DiagnosisString], weak: WeakLabelSet, variant: InputVariant,
           cfg: TrainConfig, k: int = 10, seed: int = 0, labels: str = "weak",
           embedder: Optional[EmbedderConfig] = None) -> EvalReport:
    return Evaluator(corpus, diagnoses, weak, cfg, embedder).run_cv(labels, variant, k, seed)


def _percent(summary: Dict[str, MetricSummary], key: str, with_std: bool) -> str:
    value = summary.get(key)
    if value is None:
        return "-"
    text = f"{100 * value.mean:.2f}"
    return f"{text} ({100 * value.std:.2f})" if with_std else text


def render_table(rows: Sequence[Tuple[str, Union[EvalReport, BaselineResult]]],
                 threshold: float = 0.5, pca_dim: Optional[int] = None) -> str:
    """Text table of P/R/F1/AUC against weak (W) and gold (G) labels, std in parentheses."""
    header = ["Model", "P-W", "R-W", "F1-W", "AUC-W", "P-G", "R-G", "F1-G", "AUC-G"]
    body = []
    for name, result in rows:
        if isinstance(result, BaselineResult):
            summary = {}
            for source in ("weak", "gold"):
                metrics = getattr(result, source)
                if metrics is not None:
                    for metric in ("precision", "recall", "f1"):
                        summary[f"{source}.{metric}"] = MetricSummary(mean=getattr(metrics, metric), std=0.0, n=1)
            with_std = False
        else:
            summary, with_std = result.summary, True
        cells = [name]
        for source in ("weak", "gold"):
            cells.extend(_percent(summary, f"{source}.{m}", with_std) for m in METRIC_NAMES)
        body.append(cells)

    widths = [max(len(str(r[i])) for r in [header] + body) for i in range(len(header))]
    lines = [
        f"Decision threshold {threshold}" + (f", PCA k={pca_dim}" if pca_dim is not None else "")
        + ". Std. dev. (sample, over folds) in parentheses. W = weak labels, G = gold labels.",
        "  ".join(h.ljust(w) for h, w in zip(header, widths)),
        "  ".join("-" * w for w in widths),
    ]
    lines.extend("  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in body)
    return "\n".join(line.rstrip() for line in lines) + "\n"


def write_report_json(report, path: Path) -> Path:
    payload = report.model_dump(mode="json")
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return Path(path)


def write_folds_csv(reports: Sequence[Tuple[str, EvalReport]], path: Path) -> Path:
    rows = []
    for name, report in reports:
        for fold in report.folds:
            for source in ("weak", "gold"):
                metrics = getattr(fold, source)
                rows.append({
                    "report": name,
                    "fold": fold.fold,
                    "labels": source,
                    "skipped": fold.skipped,
                    "n_test": fold.n_test,
                    "precision": metrics.precision if metrics else None,
                    "recall": metrics.recall if metrics else None,
                    "f1": metrics.f1 if metrics else None,
                    "auc": metrics.auc if metrics else None,
                    "support": metrics.support if metrics else None,
                    "note": fold.note or "",
                })
    pd.DataFrame(rows).to_csv(path, index=False, lineterminator="\n")
    return Path(path)
