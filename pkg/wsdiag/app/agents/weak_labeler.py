import json
import logging
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import pandas as pd

from wsdiag.app.exceptions import ParameterError
from wsdiag.app.schemas.schemas import (
    ClusterSelection,
    ClusterSummary,
    Corpus,
    DiagnosisString,
    DiseaseDefinition,
    ExtractionResult,
    WeakLabelSet,
    packaged_json,
)
from wsdiag.scrapers.diagnosis_scraper import string_id

logger = logging.getLogger(__name__)

WEAK_LABEL_COLUMNS = ["letter_id", "weak_label", "cluster_id", "fired_definition"]


class WeakLabeler:
    """
    Maps keyword-summarized clusters to a disease and labels letters through their diagnosis strings.
    """

    def __init__(self, definitions: Sequence[DiseaseDefinition]):
        self.definitions = list(definitions)

    def select(self, summaries: Sequence[ClusterSummary]) -> ClusterSelection:
        levels = {s.level for s in summaries}
        if len(levels) > 1:
            raise ParameterError(f"summaries mix cluster levels {sorted(levels)}")
        level = levels.pop() if levels else 2

        selected: List[int] = []
        explanations: Dict[int, str] = {}
        for summary in summaries:
            fired = self._first_match(summary.keywords)
            if fired is not None:
                selected.append(summary.cluster_id)
                explanations[summary.cluster_id] = fired.label

        if not selected:
            logger.warning("No level-%d cluster matches any disease definition", level)
        else:
            logger.info("Selected %d of %d level-%d clusters", len(selected), len(summaries), level)
        return ClusterSelection(level=level, selected=sorted(selected), explanations=explanations)

    def _first_match(self, keywords: Sequence[str]) -> Optional[DiseaseDefinition]:
        present = set(keywords)
        for definition in self.definitions:
            if set(definition.positive) <= present and not present.intersection(definition.negative):
                return definition
        return None

    def assign(self, corpus: Corpus, diagnoses: Union[ExtractionResult, Mapping[str, DiagnosisString]],
               string_clusters: Mapping[str, int], selection: ClusterSelection) -> WeakLabelSet:
        """
        One label per letter: 1 iff its trimmed diagnosis belongs to a selected cluster.

        string_clusters maps string ids to cluster ids at the selection level;
        noise and degenerate strings are simply absent from it.
        """
        diag_map = diagnoses.diagnoses if isinstance(diagnoses, ExtractionResult) else diagnoses
        selected = set(selection.selected)

        labels, cluster_of, string_of, fired = {}, {}, {}, {}
        for letter in corpus.letters:
            diag = diag_map.get(letter.id)
            sid = string_id(diag.trimmed) if diag is not None and diag.trimmed else None
            cluster = string_clusters.get(sid) if sid is not None else None
            positive = cluster is not None and cluster in selected
            labels[letter.id] = int(positive)
            cluster_of[letter.id] = cluster
            string_of[letter.id] = sid
            fired[letter.id] = selection.explanations.get(cluster) if positive else None

        label_set = WeakLabelSet(
            labels=labels,
            selected_clusters=sorted(selected),
            level=selection.level,
            definitions_used=self.definitions,
            cluster_of=cluster_of,
            string_of=string_of,
            fired=fired,
        )
        logger.info("Weak labels: %d positive of %d letters", label_set.n_positive, len(labels))
        return label_set


def cluster_membership(summaries: Sequence[ClusterSummary]) -> Dict[str, int]:
    membership = {}
    for summary in summaries:
        for sid in summary.member_string_ids:
            membership[sid] = summary.cluster_id
    return membership


def select_clusters(summaries: Sequence[ClusterSummary], defs: Sequence[DiseaseDefinition]) -> ClusterSelection:
    return WeakLabeler(defs).select(summaries)


def assign_weak_labels(corpus: Corpus, diag_map, assignment: Mapping[str, int],
                       selected: ClusterSelection, defs: Sequence[DiseaseDefinition] = ()) -> WeakLabelSet:
    return WeakLabeler(defs).assign(corpus, diag_map, assignment, selected)


def load_definitions(path: Optional[Path] = None) -> List[DiseaseDefinition]:
    if path is None:
        raw = packaged_json("definitions.json")
    else:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return [DiseaseDefinition.model_validate(item) for item in raw]


def export_weak_labels(label_set: WeakLabelSet, path: Path) -> Path:
    rows = [
        {
            "letter_id": letter_id,
            "weak_label": label,
            "cluster_id": "" if label_set.cluster_of.get(letter_id) is None else label_set.cluster_of[letter_id],
            "fired_definition": label_set.fired.get(letter_id) or "",
        }
        for letter_id, label in label_set.labels.items()
    ]
    pd.DataFrame(rows, columns=WEAK_LABEL_COLUMNS).to_csv(path, index=False, lineterminator="\n")
    return Path(path)


def read_weak_labels(path: Path, selection: ClusterSelection, definitions: Sequence[DiseaseDefinition],
                     diagnoses: Mapping[str, DiagnosisString]) -> WeakLabelSet:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    labels, cluster_of, string_of, fired = {}, {}, {}, {}
    for row in frame.itertuples(index=False):
        diag = diagnoses.get(row.letter_id)
        labels[row.letter_id] = int(row.weak_label)
        cluster_of[row.letter_id] = int(row.cluster_id) if row.cluster_id else None
        string_of[row.letter_id] = string_id(diag.trimmed) if diag is not None and diag.trimmed else None
        fired[row.letter_id] = row.fired_definition or None
    return WeakLabelSet(
        labels=labels,
        selected_clusters=list(selection.selected),
        level=selection.level,
        definitions_used=list(definitions),
        cluster_of=cluster_of,
        string_of=string_of,
        fired=fired,
    )
