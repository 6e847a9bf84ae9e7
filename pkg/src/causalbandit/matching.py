"""Context matching: nearest logged events under an arm-exclusion filter.

Two index flavours answer the same queries:

* :class:`ExactIndex` returns the true k nearest neighbours. Candidates come
  from a KD-tree per eligibility pool and are re-ranked with exact distances,
  ties broken by ascending event_id.
* :class:`GraphIndex` is a hierarchical navigable small-world graph. The arm
  filter is applied while the graph is traversed, so the search keeps going
  until it has ``m_prime`` eligible nodes.

Both are immutable once built and safe to query from several threads.
"""

from __future__ import annotations

import heapq
import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .data import Dataset, LoggedEvent

__all__ = [
    "EmptyPoolError",
    "distance",
    "ExactIndex",
    "GraphIndex",
    "build_exact_index",
    "build_graph_index",
    "query_counterfactual_neighbors",
    "save_index",
    "load_index",
    "INDEX_MAGIC",
    "INDEX_VERSION",
]

INDEX_MAGIC = "CAUSALBANDIT-INDEX"
INDEX_VERSION = 1
METRICS = ("euclidean", "cosine")


class EmptyPoolError(LookupError):
    """No logged event satisfies the neighbour eligibility filter."""


def _unit_rows(X: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(X, axis=-1, keepdims=True)
    return np.divide(X, norms, out=np.zeros_like(X), where=norms > 0)


def distance(a, b, metric: str = "euclidean") -> float:
    """Distance between two contexts.

    ``"euclidean"`` is the default. ``"cosine"`` returns ``1 - cos(a, b)``
    (a zero vector is at distance 0 from itself and 1 from anything else).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if metric == "euclidean":
        # math.dist rescales internally, so tiny differences do not underflow to 0.
        return math.dist(a.ravel().tolist(), b.ravel().tolist())
    if metric == "cosine":
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0:
            return 0.0 if na == nb else 1.0
        return float(max(0.0, 1.0 - np.dot(a, b) / (na * nb)))
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


class _BaseIndex:
    metric: str

    def __init__(self, contexts, arms, event_ids, metric: str = "euclidean"):
        if metric not in METRICS:
            raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
        X = np.array(contexts, dtype=float, ndmin=2)
        if X.shape[0] == 0:
            raise ValueError("cannot index an empty dataset")
        self.metric = metric
        self.contexts = X
        self.contexts.setflags(write=False)
        self.arms = np.array(arms, dtype=int)
        self.event_ids = np.array(event_ids, dtype=np.int64)
        # Euclidean distance on unit vectors is monotone in cosine distance.
        self._search_space = _unit_rows(X) if metric == "cosine" else X

    def __len__(self) -> int:
        return self.contexts.shape[0]

    @property
    def dimension(self) -> int:
        return self.contexts.shape[1]

    def _prep(self, q: np.ndarray) -> np.ndarray:
        return _unit_rows(q) if self.metric == "cosine" else q

    def distances_to(self, q, positions) -> np.ndarray:
        """Exact metric distances from ``q`` (shape ``(..., d)``) to indexed rows."""
        P = self.contexts[positions]
        q = np.asarray(q, dtype=float)
        if self.metric == "euclidean":
            return np.sqrt(np.sum((P - q[..., None, :]) ** 2, axis=-1))
        u = _unit_rows(P)
        v = _unit_rows(q)[..., None, :]
        cos = np.sum(u * v, axis=-1)
        nz_p = np.linalg.norm(P, axis=-1) > 0
        nz_q = np.linalg.norm(q, axis=-1, keepdims=True) > 0
        d = np.maximum(0.0, 1.0 - cos)
        return np.where(nz_p & nz_q, d, np.where(nz_p == nz_q, 0.0, 1.0))

    def eligible_mask(self, exclude_arm=None, exclude_event=None) -> np.ndarray:
        mask = np.ones(len(self), dtype=bool)
        if exclude_arm is not None:
            mask &= self.arms != int(exclude_arm)
        if exclude_event is not None:
            mask &= self.event_ids != int(exclude_event)
        return mask

    def matches(self, dataset: Dataset) -> bool:
        return len(dataset) == len(self) and np.array_equal(dataset.event_ids, self.event_ids)


class ExactIndex(_BaseIndex):
    """Exact k-nearest-neighbour index over a dataset."""

    kind = "exact"

    def __init__(self, contexts, arms, event_ids, metric: str = "euclidean"):
        super().__init__(contexts, arms, event_ids, metric)
        self._pools: dict = {}

    def _pool(self, exclude_arm):
        key = None if exclude_arm is None else int(exclude_arm)
        if key not in self._pools:
            positions = np.flatnonzero(self.eligible_mask(exclude_arm=key))
            tree = cKDTree(self._search_space[positions]) if len(positions) else None
            self._pools[key] = (positions, tree)
        return self._pools[key]

    def query(self, q, k: int, exclude_arm=None, exclude_event=None):
        """Return ``(positions, distances)`` of the ``k`` nearest eligible rows."""
        pos, dist = self.query_batch(
            np.asarray(q, dtype=float)[None, :],
            k,
            exclude_arm=exclude_arm,
            exclude_events=None if exclude_event is None else [exclude_event],
        )
        keep = pos[0] >= 0
        return pos[0][keep], dist[0][keep]

    def query_batch(self, Q, k: int, exclude_arm=None, exclude_events=None):
        """Vectorised :meth:`query` for a block of queries sharing ``exclude_arm``.

        Returns ``(positions, distances)`` of shape ``(n, k)``; rows with fewer
        eligible neighbours are padded with ``-1`` / ``inf``.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        Q = np.array(Q, dtype=float, ndmin=2)
        if Q.shape[1] != self.dimension:
            raise ValueError(f"dimension mismatch: {Q.shape[1]} vs {self.dimension}")
        n = Q.shape[0]
        out_pos = np.full((n, k), -1, dtype=np.int64)
        out_dist = np.full((n, k), np.inf)
        positions, tree = self._pool(exclude_arm)
        if tree is None or n == 0:
            return out_pos, out_dist
        excl = None if exclude_events is None else np.asarray(exclude_events, dtype=np.int64)
        # One spare for the excluded event, one to detect a tie at the boundary.
        kk = min(k + (2 if excl is not None else 1), len(positions))
        _, cand = tree.query(self._prep(Q), k=kk)
        cand = np.asarray(cand).reshape(n, kk)
        cand_pos = positions[cand]
        cand_dist = self.distances_to(Q, cand_pos)
        if excl is not None:
            cand_dist = np.where(self.event_ids[cand_pos] == excl[:, None], np.inf, cand_dist)
        order = np.lexsort((self.event_ids[cand_pos], cand_dist), axis=-1)
        cand_pos = np.take_along_axis(cand_pos, order, axis=1)
        cand_dist = np.take_along_axis(cand_dist, order, axis=1)
        valid = np.isfinite(cand_dist)
        m = min(k, kk)
        out_pos[:, :m] = np.where(valid[:, :m], cand_pos[:, :m], -1)
        out_dist[:, :m] = np.where(valid[:, :m], cand_dist[:, :m], np.inf)
        if kk > m:
            # The kd-tree may cut a run of equal distances arbitrarily; redo those rows.
            last = out_dist[:, m - 1]
            tied = np.flatnonzero(np.isfinite(last) & (cand_dist[:, m] <= last))
            for r in tied:
                out_pos[r], out_dist[r] = self._scan(Q[r], k, positions, excl, r)
        return out_pos, out_dist

    def _scan(self, q, k, positions, excl, r):
        d = self.distances_to(q, positions)
        if excl is not None:
            d = np.where(self.event_ids[positions] == excl[r], np.inf, d)
        order = np.lexsort((self.event_ids[positions], d))[:k]
        pos = np.full(k, -1, dtype=np.int64)
        dist = np.full(k, np.inf)
        ok = np.isfinite(d[order])
        pos[: len(order)] = np.where(ok, positions[order], -1)
        dist[: len(order)] = np.where(ok, d[order], np.inf)
        return pos, dist


class GraphIndex(_BaseIndex):
    """Hierarchical navigable small-world graph.

    Parameters
    ----------
    max_degree : int
        Links per node on upper layers; layer 0 allows twice as many.
    ef_construction : int
        Beam width while inserting.
    rng_seed : int
        Seed for layer assignment; the graph is a pure function of
        (data, parameters, seed).
    """

    kind = "graph"

    def __init__(
        self,
        contexts,
        arms,
        event_ids,
        max_degree: int = 16,
        ef_construction: int = 200,
        rng_seed: int = 0,
        metric: str = "euclidean",
        ef_search: int = 64,
        _layers=None,
        _levels=None,
        _entry=None,
    ):
        if max_degree < 2:
            raise ValueError("max_degree must be >= 2")
        if ef_construction < max_degree:
            raise ValueError("ef_construction must be >= max_degree")
        super().__init__(contexts, arms, event_ids, metric)
        self.max_degree = int(max_degree)
        self.ef_construction = int(ef_construction)
        self.ef_search = int(ef_search)
        self.rng_seed = int(rng_seed)
        if _layers is not None:
            self.layers = _layers
            self.levels = np.asarray(_levels, dtype=int)
            self.entry_point = int(_entry)
        else:
            self._build()

    # -- construction -------------------------------------------------

    def _d(self, i: int, others) -> np.ndarray:
        V = self._search_space
        return np.sqrt(np.sum((V[others] - V[i]) ** 2, axis=-1))

    def _build(self) -> None:
        n = len(self)
        rng = np.random.default_rng(self.rng_seed)
        ml = 1.0 / math.log(self.max_degree)
        u = 1.0 - rng.random(n)
        self.levels = np.floor(-np.log(u) * ml).astype(int)
        top = int(self.levels.max())
        links: list[dict[int, list[int]]] = [dict() for _ in range(top + 1)]
        entry, entry_level = 0, int(self.levels[0])
        for lc in range(entry_level + 1):
            links[lc][0] = []
        for i in range(1, n):
            lvl = int(self.levels[i])
            for lc in range(lvl + 1):
                links[lc][i] = []
            q = self._search_space[i]
            eps = [entry]
            for lc in range(entry_level, lvl, -1):
                eps = [self._search_layer(q, eps, 1, links[lc])[0][1]]
            for lc in range(min(lvl, entry_level), -1, -1):
                found = self._search_layer(q, eps, self.ef_construction, links[lc])
                cap = self._cap(lc)
                chosen = self._select(found, cap)
                links[lc][i] = chosen
                for nb in chosen:
                    nbl = links[lc][nb]
                    nbl.append(i)
                    if len(nbl) > cap:
                        dd = self._d(nb, nbl)
                        links[lc][nb] = self._select(sorted(zip(dd.tolist(), nbl)), cap)
                eps = [c for _, c in found]
            if lvl > entry_level:
                entry, entry_level = i, lvl
        self.entry_point = entry
        self.layers = [{k: tuple(v) for k, v in layer.items()} for layer in links]

    def _cap(self, layer: int) -> int:
        return 2 * self.max_degree if layer == 0 else self.max_degree

    def _select(self, candidates, cap: int) -> list[int]:
        """Diversity heuristic: keep a candidate only if it is closer to the
        base than to every neighbour already kept; back-fill with the
        nearest discarded ones."""
        cands = sorted(candidates)
        if len(cands) <= cap:
            return [c for _, c in cands]
        ids = [c for _, c in cands]
        V = self._search_space[ids]
        sq = np.sum(V * V, axis=1)
        D = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * V @ V.T, 0.0))
        closest = np.full(len(ids), np.inf)  # distance to the nearest kept candidate
        kept: list[int] = []
        dropped: list[int] = []
        for j, (dq, _) in enumerate(cands):
            if len(kept) >= cap:
                break
            if closest[j] < dq:
                dropped.append(j)
                continue
            kept.append(j)
            np.minimum(closest, D[j], out=closest)
        for j in dropped:
            if len(kept) >= cap:
                break
            kept.append(j)
        return [ids[j] for j in sorted(kept)]

    def _search_layer(self, q, entry_points, ef: int, layer: dict, eligible=None):
        """Best-first beam search on one layer.

        Returns up to ``ef`` ``(distance, node)`` pairs sorted ascending. With
        ``eligible`` given, only eligible nodes enter the result set but every
        node may be traversed.
        """
        V = self._search_space
        visited = set(entry_points)
        d0 = np.sqrt(np.sum((V[list(entry_points)] - q) ** 2, axis=-1)).tolist()
        candidates = list(zip(d0, entry_points))
        heapq.heapify(candidates)
        results: list[tuple[float, int]] = []  # max-heap via negation
        for d, c in zip(d0, entry_points):
            if eligible is None or eligible[c]:
                heapq.heappush(results, (-d, -c))
        if len(results) > ef:
            results = heapq.nsmallest(ef, results)
            heapq.heapify(results)
        while candidates:
            d, c = heapq.heappop(candidates)
            if len(results) >= ef and d > -results[0][0]:
                break
            nbrs = [nb for nb in layer.get(c, ()) if nb not in visited]
            if not nbrs:
                continue
            visited.update(nbrs)
            dn = np.sqrt(np.sum((V[nbrs] - q) ** 2, axis=-1)).tolist()
            for dd, nb in zip(dn, nbrs):
                if len(results) < ef or dd < -results[0][0]:
                    heapq.heappush(candidates, (dd, nb))
                    if eligible is None or eligible[nb]:
                        heapq.heappush(results, (-dd, -nb))
                        if len(results) > ef:
                            heapq.heappop(results)
        return sorted((-d, -c) for d, c in results)

    # -- queries --------------------------------------------------------

    def edges(self) -> set[tuple[int, int, int]]:
        """All directed edges as ``(layer, src, dst)``."""
        return {(lc, s, t) for lc, layer in enumerate(self.layers) for s, ts in layer.items() for t in ts}

    def reachable_from_entry(self) -> set[int]:
        seen = {self.entry_point}
        stack = [self.entry_point]
        while stack:
            s = stack.pop()
            for layer in self.layers:
                for t in layer.get(s, ()):
                    if t not in seen:
                        seen.add(t)
                        stack.append(t)
        return seen

    def query(self, q, k: int, exclude_arm=None, exclude_event=None, ef_search: int | None = None):
        """Approximate k nearest eligible rows as ``(positions, distances)``."""
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.asarray(q, dtype=float)
        if q.shape != (self.dimension,):
            raise ValueError(f"dimension mismatch: {q.shape} vs ({self.dimension},)")
        eligible = None
        if exclude_arm is not None or exclude_event is not None:
            eligible = self.eligible_mask(exclude_arm, exclude_event)
        ef = max(ef_search or self.ef_search, k)
        qs = self._prep(q)
        eps = [self.entry_point]
        for lc in range(len(self.layers) - 1, 0, -1):
            eps = [self._search_layer(qs, eps, 1, self.layers[lc])[0][1]]
        found = self._search_layer(qs, eps, ef, self.layers[0], eligible)
        pos = np.array([c for _, c in found], dtype=np.int64)
        if len(pos) == 0:
            return pos, np.zeros(0)
        dist = self.distances_to(q, pos)
        order = np.lexsort((self.event_ids[pos], dist))[:k]
        return pos[order], dist[order]


def build_exact_index(dataset: Dataset, metric: str = "euclidean") -> ExactIndex:
    if len(dataset) == 0:
        raise ValueError("cannot index an empty dataset")
    return ExactIndex(dataset.contexts, dataset.arms, dataset.event_ids, metric=metric)


def build_graph_index(
    dataset: Dataset,
    max_degree: int = 16,
    ef_construction: int = 200,
    rng_seed: int = 0,
    metric: str = "euclidean",
    ef_search: int = 64,
) -> GraphIndex:
    if len(dataset) == 0:
        raise ValueError("cannot index an empty dataset")
    return GraphIndex(
        dataset.contexts,
        dataset.arms,
        dataset.event_ids,
        max_degree=max_degree,
        ef_construction=ef_construction,
        rng_seed=rng_seed,
        metric=metric,
        ef_search=ef_search,
    )


def query_counterfactual_neighbors(
    index,
    dataset: Dataset,
    query,
    exclude_arm: int,
    m_prime: int,
    exclude_event: int | None = None,
    ef_search: int | None = None,
) -> list[LoggedEvent]:
    """Nearest logged events that were *not* shown ``exclude_arm``.

    Results are ordered by ascending distance (ties by event_id). Fewer than
    ``m_prime`` events come back only when the eligible pool is smaller.

    Raises
    ------
    EmptyPoolError
        If no event satisfies the filter.
    """
    if m_prime < 1:
        raise ValueError("m_prime must be >= 1")
    if not index.matches(dataset):
        raise ValueError("index was not built over this dataset")
    mask = index.eligible_mask(exclude_arm, exclude_event)
    pool = int(mask.sum())
    if pool == 0:
        raise EmptyPoolError(f"no logged event with arm != {exclude_arm}")
    if isinstance(index, GraphIndex):
        pos, _ = index.query(query, m_prime, exclude_arm, exclude_event, ef_search=ef_search)
        if len(pos) < min(m_prime, pool):
            # Graph search stalled inside a region with no eligible nodes.
            pos = _scan_eligible(index, query, mask, m_prime)
    else:
        pos, _ = index.query(query, m_prime, exclude_arm, exclude_event)
    return [dataset.events[i] for i in pos.tolist()]


def _scan_eligible(index: _BaseIndex, query, mask, k) -> np.ndarray:
    positions = np.flatnonzero(mask)
    d = index.distances_to(np.asarray(query, dtype=float), positions)
    order = np.lexsort((index.event_ids[positions], d))[:k]
    return positions[order]


def save_index(index, path) -> Path:
    """Write a versioned text snapshot: magic line, version line, JSON body."""
    body = {
        "kind": index.kind,
        "metric": index.metric,
        "contexts": index.contexts.tolist(),
        "arms": index.arms.tolist(),
        "event_ids": index.event_ids.tolist(),
    }
    if isinstance(index, GraphIndex):
        body.update(
            max_degree=index.max_degree,
            ef_construction=index.ef_construction,
            ef_search=index.ef_search,
            rng_seed=index.rng_seed,
            entry_point=index.entry_point,
            levels=index.levels.tolist(),
            layers=[{str(k): list(v) for k, v in layer.items()} for layer in index.layers],
        )
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{INDEX_MAGIC}\n{INDEX_VERSION}\n")
        json.dump(body, fh)
        fh.write("\n")
    return path


def load_index(path):
    with open(path, encoding="utf-8") as fh:
        magic = fh.readline().rstrip("\n")
        if magic != INDEX_MAGIC:
            raise ValueError(f"{path}: not an index snapshot")
        version = int(fh.readline())
        if version != INDEX_VERSION:
            raise ValueError(f"{path}: unsupported index version {version}")
        body = json.load(fh)
    if body["kind"] == "exact":
        return ExactIndex(body["contexts"], body["arms"], body["event_ids"], metric=body["metric"])
    layers = [{int(k): tuple(v) for k, v in layer.items()} for layer in body["layers"]]
    return GraphIndex(
        body["contexts"],
        body["arms"],
        body["event_ids"],
        max_degree=body["max_degree"],
        ef_construction=body["ef_construction"],
        rng_seed=body["rng_seed"],
        metric=body["metric"],
        ef_search=body["ef_search"],
        _layers=layers,
        _levels=body["levels"],
        _entry=body["entry_point"],
    )
