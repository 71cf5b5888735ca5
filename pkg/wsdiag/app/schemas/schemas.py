import datetime as dt
import json
import re
from importlib import resources
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    PrivateAttr,
    field_validator,
    model_validator,
)

from wsdiag.scrapers.boilerplate import detect_pediatric

UNKNOWN_GROUP = "UNKNOWN"
TOKEN_RE = re.compile(r"^[a-zà-öø-ÿ]+$")


def packaged_json(name: str):
    return json.loads(resources.files("wsdiag.data").joinpath(name).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------

class Letter(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str = Field(min_length=1)
    hospital_id: str = UNKNOWN_GROUP
    lhu_id: str = UNKNOWN_GROUP
    date: Optional[dt.date] = None
    text: str
    gold_label: Optional[bool] = None
    is_pediatric: bool = False

    @model_validator(mode="before")
    @classmethod
    def _derive_pediatric(cls, data):
        if isinstance(data, dict) and isinstance(data.get("text"), str):
            derived = detect_pediatric(data["text"])
            given = data.get("is_pediatric")
            if given is not None and bool(given) != derived:
                raise ValueError("is_pediatric disagrees with the letter header")
            data = {**data, "is_pediatric": derived}
        return data

    @field_validator("text")
    @classmethod
    def _text_not_blank(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("letter text is empty")
        return value

    @field_validator("hospital_id", "lhu_id", mode="before")
    @classmethod
    def _default_group(cls, value):
        return UNKNOWN_GROUP if value in (None, "") else value


class Corpus(BaseModel):
    model_config = ConfigDict(frozen=True)

    letters: Tuple[Letter, ...] = ()
    provenance: Literal["ingested", "synthetic"] = "ingested"
    seed: Optional[int] = None

    _index: Dict[str, Letter] = PrivateAttr(default_factory=dict)

    @model_validator(mode="after")
    def _check(self):
        if (self.provenance == "synthetic") != (self.seed is not None):
            raise ValueError("seed is set iff the corpus is synthetic")
        index = {}
        for letter in self.letters:
            if letter.id in index:
                raise ValueError(f"duplicate letter id {letter.id}")
            index[letter.id] = letter
        self._index = index
        return self

    def __len__(self) -> int:
        return len(self.letters)

    @property
    def ids(self) -> List[str]:
        return [letter.id for letter in self.letters]

    def get(self, letter_id: str) -> Letter:
        return self._index[letter_id]

    def subset(self, ids) -> "Corpus":
        wanted = set(ids)
        return Corpus(
            letters=tuple(l for l in self.letters if l.id in wanted),
            provenance=self.provenance,
            seed=self.seed,
        )

    def has_gold(self) -> bool:
        return any(letter.gold_label is not None for letter in self.letters)


class SynthesisConfig(BaseModel):
    n_letters: int = Field(default=2000, gt=0)
    target_prevalence: float = Field(default=0.03, gt=0.0, lt=1.0)
    n_hospitals: int = Field(default=5, gt=0)
    n_lhus: int = Field(default=3, gt=0)
    pediatric_fraction: float = Field(default=0.3, ge=0.0, le=1.0)
    diagnosis_section_rate: float = Field(default=0.89, gt=0.0, le=1.0)
    noise_rate: float = Field(default=0.1, ge=0.0, le=1.0)
    target_disease: str = "bronchiolite"
    disease_templates: Dict[str, List[str]] = Field(
        default_factory=lambda: packaged_json("disease_templates.json")
    )
    start_date: dt.date = dt.date(2017, 1, 1)
    span_days: int = Field(default=1460, gt=0)

    @model_validator(mode="after")
    def _check(self):
        if self.target_prevalence * self.n_letters < 1:
            raise ValueError("target_prevalence * n_letters must be at least 1")
        if not self.disease_templates.get(self.target_disease):
            raise ValueError(f"no templates for target disease {self.target_disease!r}")
        if not self.distractors:
            raise ValueError("at least one distractor disease is required")
        return self

    @property
    def distractors(self) -> List[str]:
        return [name for name, phrases in self.disease_templates.items()
                if name != self.target_disease and phrases]


# ---------------------------------------------------------------------------
# Extraction
# ---------------------------------------------------------------------------

def _is_removal_of(derived: str, source: str) -> bool:
    it = iter(source)
    return all(ch in it for ch in derived)


class DiagnosisString(BaseModel):
    model_config = ConfigDict(frozen=True)

    letter_id: str = ""
    raw: str = Field(min_length=1)
    trimmed: Optional[str] = None
    span: Tuple[int, int]

    @model_validator(mode="after")
    def _check(self):
        start, end = self.span
        if not 0 <= start < end or end - start != len(self.raw):
            raise ValueError(f"span {self.span} does not cover raw string")
        if self.trimmed is not None and not _is_removal_of(self.trimmed, self.raw):
            raise ValueError("trimmed string must only remove characters from raw")
        return self


class ExtractionRules(BaseModel):
    section_keywords: List[str] = Field(
        default_factory=lambda: list(packaged_json("extraction_rules.json")["section_keywords"])
    )
    trim_keywords: List[str] = Field(
        default_factory=lambda: list(packaged_json("extraction_rules.json")["trim_keywords"])
    )
    trim_patterns: List[str] = Field(
        default_factory=lambda: list(packaged_json("extraction_rules.json")["trim_patterns"])
    )

    @field_validator("section_keywords", "trim_keywords")
    @classmethod
    def _normalize_phrases(cls, values: List[str]) -> List[str]:
        cleaned = [" ".join(v.lower().split()) for v in values]
        if any(not v for v in cleaned):
            raise ValueError("keywords must be non-empty")
        return cleaned

    @field_validator("trim_patterns")
    @classmethod
    def _compile_patterns(cls, values: List[str]) -> List[str]:
        for pattern in values:
            re.compile(pattern)
        return values

    @property
    def ordered_triggers(self) -> List[str]:
        """Longest trigger first so prefixes never shadow longer phrases."""
        return sorted(self.section_keywords, key=len, reverse=True)

    @classmethod
    def from_file(cls, path: Path) -> "ExtractionRules":
        return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))


class ExtractionResult(BaseModel):
    diagnoses: Dict[str, DiagnosisString]
    coverage: float = Field(ge=0.0, le=1.0)
    unique_strings: int = Field(ge=0)
    n_letters: int = Field(ge=0)

    def trimmed(self, letter_id: str) -> Optional[str]:
        diag = self.diagnoses.get(letter_id)
        return diag.trimmed if diag is not None else None


# ---------------------------------------------------------------------------
# Text normalization
# ---------------------------------------------------------------------------

class AbbreviationTable(BaseModel):
    model_config = ConfigDict(frozen=True)

    entries: Dict[str, str] = Field(default_factory=dict)

    @field_validator("entries")
    @classmethod
    def _check_entries(cls, entries: Dict[str, str]) -> Dict[str, str]:
        for key, expansion in entries.items():
            if not 2 <= len(key) <= 3 or not TOKEN_RE.match(key):
                raise ValueError(f"abbreviation {key!r} must be a 2-3 letter lowercase token")
            tokens = expansion.split()
            if not tokens or not all(TOKEN_RE.match(t) for t in tokens):
                raise ValueError(f"expansion of {key!r} must be lowercase word tokens")
        keys = set(entries)
        for key, expansion in entries.items():
            if keys.intersection(expansion.split()):
                raise ValueError(f"expansion of {key!r} contains an abbreviation")
        return entries

    @classmethod
    def from_file(cls, path: Optional[Path] = None) -> "AbbreviationTable":
        if path is None:
            return cls(entries=packaged_json("abbreviations.json"))
        return cls(entries=json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# Embedding
# ---------------------------------------------------------------------------

class EmbedderConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    provider: Literal["hashed_ngram", "external_file"] = "hashed_ngram"
    dim: int = Field(default=768, ge=8)
    char_ngram_range: Tuple[int, int] = (3, 5)
    hash_seed: int = 7

    @field_validator("char_ngram_range")
    @classmethod
    def _check_range(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        low, high = value
        if low < 1 or low > high:
            raise ValueError("char_ngram_range must satisfy 1 <= min <= max")
        return value


# ---------------------------------------------------------------------------
# Clustering
# ---------------------------------------------------------------------------

class HdbscanParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    min_cluster_size: int = Field(default=5, ge=2)
    min_samples: Optional[int] = Field(default=None, ge=1)
    metric: Literal["euclidean", "cosine-distance"] = "euclidean"
    # Lets the root itself be selected when the data holds one dense group.
    allow_single_cluster: bool = False

    @field_validator("metric", mode="before")
    @classmethod
    def _metric_alias(cls, value):
        return "cosine-distance" if value == "cosine" else value

    @property
    def effective_min_samples(self) -> int:
        return self.min_samples if self.min_samples is not None else self.min_cluster_size


class ClusterAssignment(BaseModel):
    labels: List[int]
    probabilities: List[float]
    n_clusters: int = Field(ge=0)

    @model_validator(mode="after")
    def _check(self):
        if len(self.labels) != len(self.probabilities):
            raise ValueError("labels and probabilities differ in length")
        used = {label for label in self.labels if label >= 0}
        if used != set(range(self.n_clusters)):
            raise ValueError("cluster ids must be dense 0..n_clusters-1")
        for label, prob in zip(self.labels, self.probabilities):
            if label == -1 and prob != 0.0:
                raise ValueError("noise points must have probability 0")
            if not 0.0 <= prob <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
        return self

    def members(self, cluster_id: int) -> List[int]:
        return [i for i, label in enumerate(self.labels) if label == cluster_id]


class CondensedEdge(BaseModel):
    parent: int
    child: int
    lambda_val: float = Field(ge=0.0)
    child_size: int = Field(ge=1)


class CondensedTree(BaseModel):
    edges: List[CondensedEdge]
    stabilities: Dict[int, float]


# ---------------------------------------------------------------------------
# Keywords
# ---------------------------------------------------------------------------

class KeywordParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    max_keywords: int = Field(default=6, ge=1)
    min_cluster_freq: float = Field(default=0.30, gt=0.0, le=1.0)
    ratio_threshold: float = Field(default=3.0, gt=0.0)
    # Jaccard similarity of keyword sets needed to merge two clusters at level 2.
    merge_overlap: float = Field(default=0.5, gt=0.0, le=1.0)


class ClusterSummary(BaseModel):
    cluster_id: int
    size: int = Field(ge=0)
    keywords: List[str]
    member_string_ids: List[str]
    level: Literal[1, 2]
    children: List[int] = Field(default_factory=list)
    flagged: bool = False

    @property
    def keyword_string(self) -> str:
        return " ".join(sorted(self.keywords))


# ---------------------------------------------------------------------------
# Weak labels
# ---------------------------------------------------------------------------

class DiseaseDefinition(BaseModel):
    model_config = ConfigDict(frozen=True)

    disease: str
    positive: Tuple[str, ...]
    negative: Tuple[str, ...] = ()

    @field_validator("positive", "negative")
    @classmethod
    def _normalized_tokens(cls, tokens: Tuple[str, ...]) -> Tuple[str, ...]:
        for token in tokens:
            if not TOKEN_RE.match(token):
                raise ValueError(f"keyword {token!r} is not a normalized token")
        return tuple(sorted(set(tokens)))

    @model_validator(mode="after")
    def _check(self):
        if not self.positive:
            raise ValueError("a definition needs at least one positive keyword")
        if set(self.positive) & set(self.negative):
            raise ValueError("positive and negative keywords overlap")
        return self

    @property
    def label(self) -> str:
        text = "+".join(self.positive)
        if self.negative:
            text += " -" + " -".join(self.negative)
        return f"{self.disease}:{text}"


class ClusterSelection(BaseModel):
    level: Literal[1, 2]
    selected: List[int]
    explanations: Dict[int, str]


class WeakLabelSet(BaseModel):
    labels: Dict[str, int]
    selected_clusters: List[int]
    level: Literal[1, 2]
    definitions_used: List[DiseaseDefinition]
    cluster_of: Dict[str, Optional[int]] = Field(default_factory=dict)
    string_of: Dict[str, Optional[str]] = Field(default_factory=dict)
    fired: Dict[str, Optional[str]] = Field(default_factory=dict)

    @field_validator("labels")
    @classmethod
    def _binary(cls, labels: Dict[str, int]) -> Dict[str, int]:
        if any(v not in (0, 1) for v in labels.values()):
            raise ValueError("weak labels must be 0 or 1")
        return labels

    @property
    def positive_rate(self) -> float:
        return sum(self.labels.values()) / len(self.labels) if self.labels else 0.0

    @property
    def n_positive(self) -> int:
        return sum(self.labels.values())

    def without_clusters(self, cluster_ids) -> "WeakLabelSet":
        """Labels rebuilt as if the given selected clusters had not been selected."""
        dropped = set(cluster_ids)
        return self._relabel(lambda letter_id: self.cluster_of.get(letter_id) in dropped,
                             [c for c in self.selected_clusters if c not in dropped])

    def without_strings(self, string_ids) -> "WeakLabelSet":
        dropped = set(string_ids)
        return self._relabel(lambda letter_id: self.string_of.get(letter_id) in dropped,
                             list(self.selected_clusters))

    def _relabel(self, excluded, selected) -> "WeakLabelSet":
        labels = {}
        fired = {}
        for letter_id, label in self.labels.items():
            drop = label == 1 and excluded(letter_id)
            labels[letter_id] = 0 if drop else label
            fired[letter_id] = None if drop else self.fired.get(letter_id)
        return self.model_copy(update={"labels": labels, "fired": fired, "selected_clusters": selected})


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------

class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    learning_rate: float = Field(default=1e-3, gt=0.0)
    weight_decay: float = Field(default=0.01, ge=0.0)
    epochs: int = Field(default=6, ge=1)
    batch_size: int = Field(default=32, ge=1)
    seed: int = 0
    class_weighting: Literal["none", "inverse_prevalence"] = "inverse_prevalence"
    threshold: float = Field(default=0.5, gt=0.0, lt=1.0)


class InputVariant(BaseModel):
    model_config = ConfigDict(frozen=True)

    mode: Literal["with_diagnosis", "without_diagnosis"] = "with_diagnosis"
    input_mode: Literal["truncate", "chunk"] = "truncate"
    max_tokens: int = Field(default=512, ge=1)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

class Metrics(BaseModel):
    precision: float = Field(ge=0.0, le=1.0)
    recall: float = Field(ge=0.0, le=1.0)
    f1: float = Field(ge=0.0, le=1.0)
    auc: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    support: int = Field(ge=0)
    n: int = Field(ge=0)


class FoldPlan(BaseModel):
    k: int = Field(ge=2)
    assignment: Dict[str, int]
    seed: int
    stratify_on: str

    def test_ids(self, fold: int) -> List[str]:
        return [i for i, f in self.assignment.items() if f == fold]


class FoldResult(BaseModel):
    fold: int
    n_test: int
    weak: Optional[Metrics] = None
    gold: Optional[Metrics] = None
    skipped: bool = False
    note: Optional[str] = None


class MetricSummary(BaseModel):
    mean: float
    std: float = Field(ge=0.0)
    n: int = Field(ge=0)


class EvalReport(BaseModel):
    label_source: Literal["weak", "gold"]
    variant: InputVariant
    folds: List[FoldResult]
    summary: Dict[str, MetricSummary]
    settings: Dict[str, object] = Field(default_factory=dict)

    @property
    def skipped_folds(self) -> List[int]:
        return [f.fold for f in self.folds if f.skipped]


class BaselineResult(BaseModel):
    name: str
    scope: Literal["full_text", "diagnosis_only"]
    variant: InputVariant
    weak: Optional[Metrics] = None
    gold: Optional[Metrics] = None


class LogoReport(BaseModel):
    group_by: Literal["hospital", "lhu"]
    min_positives: int
    positives_source: Literal["weak", "gold"]
    groups: Dict[str, EvalReport]
    excluded: Dict[str, int]


class SubgroupReport(BaseModel):
    pediatric: EvalReport
    non_pediatric: EvalReport


class SensitivityEntry(BaseModel):
    excluded_cluster: int
    weak_positives: int
    report: EvalReport


class SensitivityReport(BaseModel):
    baseline: EvalReport
    exclusions: List[SensitivityEntry]
    note: Optional[str] = None


# ---------------------------------------------------------------------------
# Pipeline configuration
# ---------------------------------------------------------------------------

class PathsConfig(BaseModel):
    corpus: Optional[Path] = None
    rules: Optional[Path] = None
    abbreviations: Optional[Path] = None
    definitions: Optional[Path] = None
    external_embeddings: Optional[Path] = None
    output_dir: Path = Path("pipeline_out")

    @model_validator(mode="after")
    def _inputs_exist(self):
        for name in ("corpus", "rules", "abbreviations", "definitions", "external_embeddings"):
            path = getattr(self, name)
            if path is not None and not Path(path).is_file():
                raise ValueError(f"{name} file not found: {path}")
        return self


class EvaluationConfig(BaseModel):
    k: int = Field(default=10, ge=2)
    labels: Literal["weak", "gold"] = "weak"
    variants: List[Literal["with_diagnosis", "without_diagnosis"]] = Field(
        default_factory=lambda: ["with_diagnosis", "without_diagnosis"]
    )
    input_mode: Literal["truncate", "chunk"] = "truncate"
    max_tokens: int = Field(default=512, ge=1)
    compare_supervised: bool = True
    rule_term: str = "bronchiolite"
    run_subgroup: bool = True
    run_logo: bool = False
    logo_group_by: Literal["hospital", "lhu"] = "hospital"
    logo_min_positives: int = Field(default=15, ge=1)

    def variant(self, mode: str) -> InputVariant:
        return InputVariant(mode=mode, input_mode=self.input_mode, max_tokens=self.max_tokens)


class PipelineConfig(BaseModel):
    seed: int = 0
    paths: PathsConfig = Field(default_factory=PathsConfig)
    synthesis: SynthesisConfig = Field(default_factory=SynthesisConfig)
    extraction: ExtractionRules = Field(default_factory=ExtractionRules)
    embedder: EmbedderConfig = Field(default_factory=EmbedderConfig)
    pca_dim: int = Field(default=16, ge=1)
    hdbscan_level1: HdbscanParams = Field(default_factory=HdbscanParams)
    hdbscan_level2: HdbscanParams = Field(default_factory=lambda: HdbscanParams(min_cluster_size=2))
    keywords: KeywordParams = Field(default_factory=KeywordParams)
    selection_level: Literal[1, 2] = 2
    train: TrainConfig = Field(default_factory=TrainConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)

    @model_validator(mode="after")
    def _external_needs_file(self):
        if self.embedder.provider == "external_file" and self.paths.external_embeddings is None:
            raise ValueError("embedder provider external_file needs paths.external_embeddings")
        return self

    @classmethod
    def from_file(cls, path: Path) -> "PipelineConfig":
        return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))

    def snapshot(self) -> dict:
        """Fully materialized config, minus where it is being written."""
        data = self.model_dump(mode="json")
        data["paths"].pop("output_dir", None)
        return data
