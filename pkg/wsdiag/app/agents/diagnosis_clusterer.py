"""Density-based clustering of reduced diagnosis vectors (HDBSCAN).

Core distances, the mutual-reachability minimum spanning tree, the
single-linkage hierarchy, tree condensation and excess-of-mass selection are
all computed exactly on dense matrices.
"""
import logging
from collections import deque
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from wsdiag.app.exceptions import ParameterError
from wsdiag.app.schemas.schemas import (
    ClusterAssignment,
    CondensedEdge,
    CondensedTree,
    HdbscanParams,
)

logger = logging.getLogger(__name__)

Edge = Tuple[int, int, float]


def pairwise_distances(points: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    if metric == "euclidean":
        distances = np.empty((n, n))
        for i in range(n):
            diff = points - points[i]
            distances[i] = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        return distances
    if metric in ("cosine", "cosine-distance"):
        norms = np.linalg.norm(points, axis=1, keepdims=True)
        unit = np.divide(points, norms, out=np.zeros_like(points), where=norms > 0)
        distances = np.clip(1.0 - unit @ unit.T, 0.0, 2.0)
        distances = (distances + distances.T) / 2.0
        np.fill_diagonal(distances, 0.0)
        return distances
    raise ParameterError(f"unknown metric {metric!r}")


def core_distances(points: np.ndarray, k: int, metric: str = "euclidean",
                   distances: Optional[np.ndarray] = None) -> np.ndarray:
    """Distance from each point to its k-th nearest neighbour, itself excluded."""
    n = len(points)
    if k < 1:
        raise ParameterError("min_samples must be at least 1")
    if n <= k:
        raise ParameterError(f"need more than min_samples={k} points, got {n}")
    if distances is None:
        distances = pairwise_distances(points, metric)
    others = distances.copy()
    np.fill_diagonal(others, np.inf)
    return np.partition(others, k - 1, axis=1)[:, k - 1]


def mutual_reachability(distances: np.ndarray, core: np.ndarray) -> np.ndarray:
    reach = np.maximum(distances, np.maximum.outer(core, core))
    np.fill_diagonal(reach, 0.0)
    return reach


def minimum_spanning_tree(weights: np.ndarray) -> List[Edge]:
    """
    Prim's algorithm on a dense symmetric weight matrix.

    Ties are broken on (weight, smaller index, larger index) so the tree is
    unique for any input.
    """
    n = weights.shape[0]
    if n < 2:
        return []
    in_tree = np.zeros(n, dtype=bool)
    in_tree[0] = True
    best = weights[0].astype(float).copy()
    via = np.zeros(n, dtype=np.int64)
    nodes = np.arange(n)
    edges: List[Edge] = []

    for _ in range(n - 1):
        candidates = nodes[~in_tree]
        lowest = best[candidates].min()
        tied = candidates[best[candidates] == lowest]
        keys = [(min(via[j], j), max(via[j], j)) for j in tied]
        pick = int(tied[keys.index(min(keys))])
        a, b = sorted((int(via[pick]), pick))
        edges.append((a, b, float(lowest)))
        in_tree[pick] = True

        row = weights[pick]
        outside = ~in_tree
        lower = outside & (row < best)
        same = outside & (row == best)
        if same.any():
            for j in nodes[same]:
                if (min(pick, j), max(pick, j)) < (min(via[j], j), max(via[j], j)):
                    via[j] = pick
        best[lower] = row[lower]
        via[lower] = pick
    return edges


def mutual_reachability_mst(points: np.ndarray, core: np.ndarray, metric: str = "euclidean") -> List[Edge]:
    if len(points) < 2:
        raise ParameterError("a spanning tree needs at least 2 points")
    reach = mutual_reachability(pairwise_distances(points, metric), np.asarray(core, dtype=float))
    return minimum_spanning_tree(reach)


def single_linkage(mst: Sequence[Edge], n: int) -> np.ndarray:
    """Merge hierarchy in scipy linkage layout: (left, right, distance, size)."""
    ordered = sorted(mst, key=lambda e: (e[2], min(e[0], e[1]), max(e[0], e[1])))
    parent = list(range(2 * n - 1))
    size = [1] * n + [0] * (n - 1)

    def find(x: int) -> int:
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    linkage = np.zeros((n - 1, 4))
    for i, (a, b, weight) in enumerate(ordered):
        ra, rb = find(a), find(b)
        new = n + i
        parent[ra] = new
        parent[rb] = new
        size[new] = size[ra] + size[rb]
        linkage[i] = (min(ra, rb), max(ra, rb), weight, size[new])
    return linkage


class DiagnosisClusterer:
    """
    Runs HDBSCAN over reduced vectors and keeps the last condensed tree for inspection.
    """

    def __init__(self, params: Optional[HdbscanParams] = None):
        self.params = params or HdbscanParams()
        self.condensed_tree: Optional[CondensedTree] = None

    def cluster(self, points: np.ndarray) -> ClusterAssignment:
        points = np.asarray(points, dtype=float)
        if len(points) < 2:
            raise ParameterError("clustering needs at least 2 points")
        distances = pairwise_distances(points, self.params.metric)
        core = core_distances(points, self.params.effective_min_samples, distances=distances)
        mst = minimum_spanning_tree(mutual_reachability(distances, core))
        tree, assignment = self.condense_extract(mst)
        logger.info(
            "HDBSCAN on %d points (min_cluster_size=%d, min_samples=%d): %d clusters, %d noise",
            len(points), self.params.min_cluster_size, self.params.effective_min_samples,
            assignment.n_clusters, assignment.labels.count(-1),
        )
        return assignment

    def condense_extract(self, mst: Sequence[Edge]) -> Tuple[CondensedTree, ClusterAssignment]:
        n = len(mst) + 1
        linkage = single_linkage(mst, n)
        raw_edges = self._condense(linkage, n)
        stabilities = self._stabilities(raw_edges, n)
        selected = self._select(raw_edges, stabilities, n)
        assignment = self._label(raw_edges, selected, n)

        self.condensed_tree = CondensedTree(
            edges=[CondensedEdge(parent=p, child=c, lambda_val=lam, child_size=s)
                   for p, c, lam, s in raw_edges],
            stabilities=stabilities,
        )
        return self.condensed_tree, assignment

    def _condense(self, linkage: np.ndarray, n: int) -> List[Tuple[int, int, float, int]]:
        mcs = self.params.min_cluster_size
        distances = linkage[:, 2] if len(linkage) else np.zeros(0)
        positive = distances[distances > 0]
        # Zero-distance merges (duplicate points) sit just above the densest real merge.
        zero_lambda = 2.0 / positive.min() if positive.size else 1.0

        def size_of(node: int) -> int:
            return 1 if node < n else int(linkage[node - n, 3])

        def points_under(node: int) -> List[int]:
            found, queue = [], deque([node])
            while queue:
                current = queue.popleft()
                if current < n:
                    found.append(current)
                else:
                    left, right = linkage[current - n, :2].astype(int)
                    queue.extend((left, right))
            return found

        if n < 2:
            return []
        root = 2 * n - 2
        relabel = {root: n}
        next_label = n + 1
        root_peeled = False
        edges: List[Tuple[int, int, float, int]] = []

        queue = deque([root])
        while queue:
            node = queue.popleft()
            left, right, distance, _ = linkage[node - n]
            left, right = int(left), int(right)
            lam = 1.0 / distance if distance > 0 else zero_lambda
            parent = relabel[node]
            left_size, right_size = size_of(left), size_of(right)

            if left_size >= mcs and right_size >= mcs:
                for child, child_size in ((left, left_size), (right, right_size)):
                    relabel[child] = next_label
                    edges.append((parent, next_label, lam, child_size))
                    next_label += 1
                    queue.append(child)
            elif left_size < mcs and right_size < mcs:
                for child in (left, right):
                    for point in sorted(points_under(child)):
                        edges.append((parent, point, lam, 1))
            else:
                small, big = (left, right) if left_size < mcs else (right, left)
                for point in sorted(points_under(small)):
                    edges.append((parent, point, lam, 1))
                if parent == n and not root_peeled and self.params.allow_single_cluster:
                    # The group left after the first stragglers fall off the root may be selected.
                    root_peeled = True
                    relabel[big] = next_label
                    edges.append((parent, next_label, lam, size_of(big)))
                    next_label += 1
                else:
                    relabel[big] = parent
                # big holds at least min_cluster_size >= 2 points, so it is a merge node
                queue.append(big)
        return edges

    @staticmethod
    def _stabilities(edges, n: int) -> Dict[int, float]:
        birth = {n: 0.0}
        for parent, child, lam, _ in edges:
            if child >= n:
                birth[child] = lam
        stability = {node: 0.0 for node in birth}
        for parent, child, lam, size in edges:
            stability[parent] += (lam - birth[parent]) * size
        return stability

    @staticmethod
    def _select(edges, stabilities: Dict[int, float], n: int) -> List[int]:
        children: Dict[int, List[int]] = {node: [] for node in stabilities}
        for parent, child, _, _ in edges:
            if child >= n:
                children[parent].append(child)

        subtree = dict(stabilities)
        chosen = {node: True for node in stabilities if node != n}
        for node in sorted(chosen, reverse=True):
            if not children[node]:
                continue
            below = sum(subtree[child] for child in children[node])
            # ties go to the children
            if below >= stabilities[node]:
                chosen[node] = False
                subtree[node] = below
            else:
                stack = list(children[node])
                while stack:
                    descendant = stack.pop()
                    chosen[descendant] = False
                    stack.extend(children[descendant])
        return sorted(node for node, keep in chosen.items() if keep)

    @staticmethod
    def _label(edges, selected: List[int], n: int) -> ClusterAssignment:
        cluster_parent: Dict[int, int] = {}
        point_edge: Dict[int, Tuple[int, float]] = {}
        for parent, child, lam, _ in edges:
            if child >= n:
                cluster_parent[child] = parent
            else:
                point_edge[child] = (parent, lam)

        dense = {node: i for i, node in enumerate(selected)}
        selected_set = set(selected)

        def owner(node: int) -> Optional[int]:
            while True:
                if node in selected_set:
                    return node
                if node not in cluster_parent:
                    return None
                node = cluster_parent[node]

        labels = [-1] * n
        lambdas = [0.0] * n
        for point, (parent, lam) in point_edge.items():
            cluster = owner(parent)
            if cluster is not None:
                labels[point] = dense[cluster]
                lambdas[point] = lam

        max_lambda = [0.0] * len(selected)
        for point, label in enumerate(labels):
            if label >= 0:
                max_lambda[label] = max(max_lambda[label], lambdas[point])
        probabilities = [
            0.0 if label < 0 else (1.0 if max_lambda[label] <= 0 else min(lambdas[p] / max_lambda[label], 1.0))
            for p, label in enumerate(labels)
        ]
        return ClusterAssignment(labels=labels, probabilities=probabilities, n_clusters=len(selected))


def condense_extract(mst: Sequence[Edge], params: HdbscanParams) -> Tuple[CondensedTree, ClusterAssignment]:
    return DiagnosisClusterer(params).condense_extract(mst)


def cluster(points: np.ndarray, params: HdbscanParams) -> ClusterAssignment:
    return DiagnosisClusterer(params).cluster(points)


def dump_condensed_tree(tree: CondensedTree, path: Path) -> Path:
    frame = pd.DataFrame(
        [(e.parent, e.child, e.lambda_val, e.child_size) for e in tree.edges],
        columns=["parent", "child", "lambda", "size"],
    )
    frame.to_csv(path, index=False, lineterminator="\n")
    return Path(path)
