import logging
from collections import Counter
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import pandas as pd

from wsdiag.app.agents.diagnosis_clusterer import DiagnosisClusterer
from wsdiag.app.schemas.schemas import (
    ClusterAssignment,
    ClusterSummary,
    EmbedderConfig,
    HdbscanParams,
    KeywordParams,
)
from wsdiag.scrapers.text_normalizer import token_string
from wsdiag.vector_store.embeddings import HashedNgramEmbedder
from wsdiag.vector_store.pca import PcaReducer

logger = logging.getLogger(__name__)


@dataclass
class TokenCounts:
    """Number of documents plus, per token, how many of them contain it."""

    n_docs: int = 0
    doc_counts: Counter = field(default_factory=Counter)

    @classmethod
    def from_documents(cls, documents: Iterable[Sequence[str]]) -> "TokenCounts":
        counts = cls()
        for tokens in documents:
            counts.add(tokens)
        return counts

    def add(self, tokens: Sequence[str]) -> None:
        self.n_docs += 1
        self.doc_counts.update(set(tokens))

    def remove(self, tokens: Sequence[str]) -> None:
        if self.n_docs == 0:
            raise ValueError("cannot remove from empty counts")
        self.n_docs -= 1
        self.doc_counts.subtract(set(tokens))
        for token in set(tokens):
            if self.doc_counts[token] <= 0:
                del self.doc_counts[token]

    def merge(self, other: "TokenCounts") -> "TokenCounts":
        return TokenCounts(self.n_docs + other.n_docs, self.doc_counts + other.doc_counts)

    def fraction(self, token: str) -> float:
        return self.doc_counts.get(token, 0) / self.n_docs if self.n_docs else 0.0


def cluster_keywords(members: Sequence[Sequence[str]], corpus_stats: TokenCounts,
                     params: Optional[KeywordParams] = None) -> List[str]:
    """
    Tokens frequent inside the cluster but rare over the whole population.

    Returned alphabetically; empty when no token passes both thresholds.
    """
    params = params or KeywordParams()
    cluster = TokenCounts.from_documents(m for m in members if m)
    if cluster.n_docs == 0:
        return []
    floor = 1.0 / max(corpus_stats.n_docs, 1)

    scored = []
    for token in cluster.doc_counts:
        in_cluster = cluster.fraction(token)
        score = in_cluster / max(corpus_stats.fraction(token), floor)
        if in_cluster >= params.min_cluster_freq and score >= params.ratio_threshold:
            scored.append((-score, token))
    top = sorted(scored)[:params.max_keywords]
    return sorted(token for _, token in top)


class KeywordSummarizer:
    """
    Builds keyword summaries of first-level clusters and merges them into second-level ones.

    The population is the set of distinct normalized diagnosis strings; member
    strings that normalize identically count once.
    """

    def __init__(self, string_tokens: Mapping[str, Sequence[str]], params: Optional[KeywordParams] = None):
        self.params = params or KeywordParams()
        self.string_tokens = {sid: list(tokens) for sid, tokens in string_tokens.items()}
        distinct = {token_string(t): t for t in self.string_tokens.values() if t}
        self.corpus = TokenCounts.from_documents(distinct[key] for key in sorted(distinct))

    def member_documents(self, string_ids: Iterable[str]) -> List[List[str]]:
        distinct = {}
        for sid in string_ids:
            tokens = self.string_tokens.get(sid, [])
            if tokens:
                distinct.setdefault(token_string(tokens), tokens)
        return [distinct[key] for key in sorted(distinct)]

    def keywords(self, string_ids: Iterable[str]) -> List[str]:
        return cluster_keywords(self.member_documents(string_ids), self.corpus, self.params)

    def summarize(self, assignment: ClusterAssignment, point_string_ids: Sequence[Sequence[str]]) -> List[ClusterSummary]:
        """First-level summaries; point i owns the string ids point_string_ids[i]."""
        summaries = []
        for cluster_id in range(assignment.n_clusters):
            members = sorted(
                sid for point in assignment.members(cluster_id) for sid in point_string_ids[point]
            )
            summaries.append(self._summary(cluster_id, members, level=1))
        return summaries

    def second_level_merge(self, level1: Sequence[ClusterSummary], embedder: EmbedderConfig,
                           pca_dim: int, params: HdbscanParams) -> List[ClusterSummary]:
        """
        Merge first-level clusters whose keyword strings cluster together.

        Within a level-2 density cluster only clusters linked by shared keywords
        are merged; the rest, together with level-2 noise and flagged clusters,
        pass through as singletons.
        """
        eligible = [s for s in level1 if not s.flagged]
        groups: List[List[ClusterSummary]] = []
        leftovers = [s for s in level1 if s.flagged]

        if len(eligible) >= 2:
            labels = self._cluster_keyword_strings(eligible, embedder, pca_dim, params)
            for label in range(max(labels) + 1):
                members = [s for s, l in zip(eligible, labels) if l == label]
                for component in self.keyword_components(members):
                    if len(component) > 1:
                        groups.append(component)
                    else:
                        leftovers.extend(component)
            leftovers.extend(s for s, l in zip(eligible, labels) if l == -1)
        else:
            leftovers.extend(eligible)

        groups.extend([s] for s in sorted(leftovers, key=lambda s: s.cluster_id))
        merged = []
        for level2_id, group in enumerate(groups):
            members = sorted(sid for s in group for sid in s.member_string_ids)
            summary = self._summary(level2_id, members, level=2)
            merged.append(summary.model_copy(update={
                "size": sum(s.size for s in group),
                "children": sorted(s.cluster_id for s in group),
            }))
        logger.info("Second-level merge: %d first-level clusters -> %d", len(level1), len(merged))
        return merged

    def keyword_components(self, summaries: Sequence[ClusterSummary]) -> List[List[ClusterSummary]]:
        """Groups of clusters linked by keyword-set Jaccard similarity, in input order."""
        parent = list(range(len(summaries)))

        def find(x: int) -> int:
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        keyword_sets = [set(s.keywords) for s in summaries]
        for i, j in combinations(range(len(summaries)), 2):
            shared = len(keyword_sets[i] & keyword_sets[j])
            if shared and shared / len(keyword_sets[i] | keyword_sets[j]) >= self.params.merge_overlap:
                parent[find(j)] = find(i)

        components: Dict[int, List[ClusterSummary]] = {}
        for i, summary in enumerate(summaries):
            components.setdefault(find(i), []).append(summary)
        return list(components.values())

    def _cluster_keyword_strings(self, eligible: Sequence[ClusterSummary], embedder: EmbedderConfig,
                                 pca_dim: int, params: HdbscanParams) -> List[int]:
        hashed = HashedNgramEmbedder(embedder.model_copy(update={"provider": "hashed_ngram"}))
        matrix, _ = hashed.embed_many(sorted(s.keywords) for s in eligible)
        m = len(eligible)
        reducer = PcaReducer()
        model = reducer.fit(matrix, min(pca_dim, m - 1, matrix.shape[1]))
        reduced = reducer.project(model, matrix)
        # the root is never a level-2 cluster
        clamped = params.model_copy(update={
            "min_samples": min(params.effective_min_samples, m - 1),
            "allow_single_cluster": False,
        })
        return DiagnosisClusterer(clamped).cluster(reduced).labels

    def _summary(self, cluster_id: int, members: List[str], level: int) -> ClusterSummary:
        keywords = self.keywords(members)
        flagged = not keywords
        if flagged:
            keywords = [f"_cluster_{cluster_id}"]
            logger.warning("Level-%d cluster %d has no distinctive keywords", level, cluster_id)
        return ClusterSummary(
            cluster_id=cluster_id,
            size=len(members),
            keywords=keywords,
            member_string_ids=members,
            level=level,
            flagged=flagged,
        )


def second_level_merge(level1: Sequence[ClusterSummary], summarizer: KeywordSummarizer,
                       embedder: EmbedderConfig, pca_dim: int = 16,
                       params: Optional[HdbscanParams] = None) -> List[ClusterSummary]:
    return summarizer.second_level_merge(level1, embedder, pca_dim, params or HdbscanParams(min_cluster_size=2))


def write_cluster_report(summaries: Sequence[ClusterSummary], path: Path) -> Path:
    rows = [
        {
            "level": s.level,
            "cluster_id": s.cluster_id,
            "size": s.size,
            "keywords": " ".join(s.keywords),
            "children": " ".join(str(c) for c in s.children),
            "flagged": s.flagged,
        }
        for s in summaries
    ]
    columns = ["level", "cluster_id", "size", "keywords", "children", "flagged"]
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False, lineterminator="\n")
    return Path(path)
