import pandas as pd

from wsdiag.app.agents.keyword_summarizer import (
    KeywordSummarizer,
    TokenCounts,
    cluster_keywords,
    second_level_merge,
    write_cluster_report,
)
from wsdiag.app.schemas.schemas import (
    ClusterAssignment,
    ClusterSummary,
    EmbedderConfig,
    HdbscanParams,
    KeywordParams,
)

GROUPS = {
    0: "bronchiolite lieve",
    1: "acuta bronchiolite iniziale lieve",
    2: "bronchiolite iniziale lieve",
    3: "broncospasmo",
    4: "acuto broncospasmo",
    5: "broncospasmo corso",
    6: "otite media",
    7: "otite media purulenta",
    8: "otite media bilaterale",
}

BACKGROUND = [
    "trauma cranico", "ferita lacero contusa", "febbre", "gastroenterite", "dolore addominale",
    "orticaria", "contusione ginocchio", "pronazione dolorosa", "faringotonsillite", "polmonite",
    "cefalea", "lombalgia", "congiuntivite", "distorsione caviglia", "vomito", "stipsi",
    "epistassi", "scarlattina", "varicella", "dermatite",
]


def _summarizer_and_level1():
    string_tokens = {f"s{cid}": text.split() for cid, text in GROUPS.items()}
    string_tokens.update({f"b{i}": text.split() for i, text in enumerate(BACKGROUND)})
    point_ids = list(string_tokens)
    labels = [int(sid[1:]) if sid.startswith("s") else -1 for sid in point_ids]
    assignment = ClusterAssignment(
        labels=labels,
        probabilities=[1.0 if label >= 0 else 0.0 for label in labels],
        n_clusters=len(GROUPS),
    )
    summarizer = KeywordSummarizer(string_tokens)
    return summarizer, summarizer.summarize(assignment, [[sid] for sid in point_ids])


def _corpus_with(documents, filler, n_filler):
    return TokenCounts.from_documents(list(documents) + [filler] * n_filler)


def test_frequent_cluster_tokens_become_keywords():
    members = [["bronchiolite", "lieve"], ["bronchiolite", "acuta"],
               ["bronchiolite", "lieve", "iniziale"], ["bronchiolite"]]
    stats = _corpus_with(members, ["otite", "media"], 96)
    assert cluster_keywords(members, stats) == ["bronchiolite", "lieve"]


def test_corpus_common_token_excluded():
    members = [["paziente", "febbre"]] * 3
    stats = _corpus_with([["paziente", "febbre"]] * 3 + [["paziente", "stabile"]] * 87, ["otite"], 10)
    assert stats.fraction("paziente") == 0.9
    assert cluster_keywords(members, stats) == ["febbre"]


def test_singleton_cluster_keywords():
    stats = _corpus_with([["otite", "media", "acuta"]], ["trauma", "cranico"], 49)
    assert cluster_keywords([["otite", "media", "acuta"]], stats) == ["acuta", "media", "otite"]


def test_keywords_capped_by_score():
    members = [["alfa", "beta", "gamma"]] * 2
    stats = _corpus_with(members + [["beta"]] * 2 + [["gamma"]] * 6, ["zeta"], 40)
    params = KeywordParams(max_keywords=2)
    assert cluster_keywords(members, stats, params) == ["alfa", "beta"]


def test_empty_cluster_has_no_keywords():
    assert cluster_keywords([[]], TokenCounts.from_documents([["febbre"]])) == []


def test_token_counts_add_remove_merge():
    counts = TokenCounts.from_documents([["a", "b"], ["a"]])
    counts.remove(["a", "b"])
    assert counts.n_docs == 1 and "b" not in counts.doc_counts
    merged = counts.merge(TokenCounts.from_documents([["a", "c"]]))
    assert merged.n_docs == 2
    assert merged.fraction("a") == 1.0 and merged.fraction("c") == 0.5


def test_first_level_summaries():
    _, level1 = _summarizer_and_level1()
    assert [s.cluster_id for s in level1] == list(range(len(GROUPS)))
    assert level1[0].keywords == ["bronchiolite", "lieve"]
    assert level1[1].keyword_string == "acuta bronchiolite iniziale lieve"
    assert all(s.level == 1 and s.size == 1 and not s.flagged for s in level1)


def test_cluster_without_keywords_is_flagged():
    summarizer = KeywordSummarizer(
        {"a": ["febbre"], "b": ["otite"], "c": ["trauma"]}, KeywordParams(min_cluster_freq=1.0)
    )
    assignment = ClusterAssignment(labels=[0, 0, -1], probabilities=[1.0, 1.0, 0.0], n_clusters=1)
    (summary,) = summarizer.summarize(assignment, [["a"], ["b"], ["c"]])
    assert summary.flagged
    assert summary.keywords == ["_cluster_0"]
    assert summary.member_string_ids == ["a", "b"]


def test_related_clusters_merge_at_second_level():
    summarizer, level1 = _summarizer_and_level1()
    level2 = second_level_merge(level1, summarizer, EmbedderConfig(), 16, HdbscanParams(min_cluster_size=2))
    owner = {child: s for s in level2 for child in s.children}

    assert sorted(owner) == list(range(len(GROUPS)))
    assert len(level2) < len(level1)
    assert owner[0].cluster_id == owner[1].cluster_id
    assert owner[0].cluster_id != owner[6].cluster_id
    for summary in level2:
        assert summary.level == 2
        assert summary.size == sum(level1[c].size for c in summary.children)
        assert summary.children == sorted(summary.children)


def test_flagged_cluster_passes_through():
    summarizer, level1 = _summarizer_and_level1()
    flagged = ClusterSummary(cluster_id=9, size=1, keywords=["_cluster_9"], member_string_ids=["b0"],
                             level=1, flagged=True)
    level2 = summarizer.second_level_merge(level1 + [flagged], EmbedderConfig(), 16,
                                           HdbscanParams(min_cluster_size=2))
    holders = [s for s in level2 if 9 in s.children]
    assert len(holders) == 1 and holders[0].children == [9]


def test_single_cluster_is_its_own_level2():
    summarizer, level1 = _summarizer_and_level1()
    (only,) = summarizer.second_level_merge(level1[:1], EmbedderConfig(), 16, HdbscanParams(min_cluster_size=2))
    assert only.children == [0] and only.cluster_id == 0


def test_cluster_report_columns(tmp_path):
    _, level1 = _summarizer_and_level1()
    path = write_cluster_report(level1, tmp_path / "report.csv")
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["level", "cluster_id", "size", "keywords", "children", "flagged"]
    assert len(frame) == len(level1)


DISJOINT = ["faringotonsillite", "orticaria", "polmonite", "contusione", "otite", "gastroenterite"]


def test_keyword_disjoint_clusters_survive_unmerged():
    string_tokens = {f"d{i}": [text] for i, text in enumerate(DISJOINT)}
    string_tokens.update({f"b{i}": text.split() for i, text in enumerate(BACKGROUND[:3])})
    summarizer = KeywordSummarizer(string_tokens)
    level1 = [
        ClusterSummary(cluster_id=i, size=1, keywords=summarizer.keywords([f"d{i}"]),
                       member_string_ids=[f"d{i}"], level=1)
        for i in range(len(DISJOINT))
    ]
    assert [s.keywords for s in level1] == [[text] for text in DISJOINT]

    level2 = second_level_merge(level1, summarizer, EmbedderConfig(), 16, HdbscanParams(min_cluster_size=2))
    assert len(level2) == len(DISJOINT)
    assert sorted(s.children for s in level2) == [[i] for i in range(len(DISJOINT))]


def test_keyword_components_need_enough_overlap():
    summarizer, _ = _summarizer_and_level1()

    def summary(cluster_id, keywords):
        return ClusterSummary(cluster_id=cluster_id, size=1, keywords=keywords.split(), member_string_ids=[], level=1)

    components = summarizer.keyword_components([
        summary(0, "bronchiolite lieve"),
        summary(1, "acuta bronchiolite iniziale lieve"),
        summary(2, "acuta media otite"),
        summary(3, "broncospasmo"),
        summary(4, "acuto broncospasmo"),
    ])
    assert [[s.cluster_id for s in c] for c in components] == [[0, 1], [2], [3, 4]]

    strict = KeywordSummarizer(summarizer.string_tokens, KeywordParams(merge_overlap=1.0))
    components = strict.keyword_components([summary(0, "bronchiolite lieve"), summary(1, "acuta bronchiolite")])
    assert len(components) == 2
