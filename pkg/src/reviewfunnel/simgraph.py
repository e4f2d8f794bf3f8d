"""Threshold similarity graph over item embeddings.

Edges connect items whose cosine distance is at most theta (ties included).
Exact mode verifies every pair; blocked mode uses banded random-hyperplane
sign hashes to find candidate pairs, then verifies each candidate exactly, so
approximation can only drop edges, never invent them.

All stored edge distances come from one einsum-based kernel so that exact
mode, blocked mode, and per-pair queries agree bitwise.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

import numpy as np

from .corpus import Item

MODE_EXACT = "exact"
MODE_BLOCKED = "blocked"
GRAPH_MODES = (MODE_EXACT, MODE_BLOCKED)

DEFAULT_BANDS = 16
DEFAULT_BAND_BITS = 8

# Candidate detection pads the threshold by this much in similarity space;
# membership is always decided by the canonical kernel afterwards.
_DETECT_PAD = 1e-9


def _dots(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # einsum is bit-stable across batch shapes, unlike BLAS matmul
    return np.einsum("ij,ij->i", a, b)


def cosine_distance(a, b) -> float:
    """Cosine distance 1 - cos(a, b), clipped into [0, 2]."""
    va = np.asarray(a, dtype=np.float64)
    vb = np.asarray(b, dtype=np.float64)
    if va.ndim != 1 or vb.ndim != 1:
        raise ValueError("embeddings must be one-dimensional")
    if va.shape[0] != vb.shape[0]:
        raise ValueError(f"dimension mismatch: {va.shape[0]} != {vb.shape[0]}")
    na = math.sqrt(float(np.einsum("i,i->", va, va)))
    nb = math.sqrt(float(np.einsum("i,i->", vb, vb)))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine distance undefined for zero vector")
    dist = 1.0 - float(np.einsum("i,i->", va, vb)) / (na * nb)
    return min(max(dist, 0.0), 2.0)


class SimilarityGraph:
    """Immutable neighbor index; queries are safe from concurrent readers."""

    def __init__(
        self,
        ids: np.ndarray,
        embeddings: np.ndarray,
        norms: np.ndarray,
        theta: float,
        mode: str,
        indptr: np.ndarray,
        nbr_ids: np.ndarray,
        nbr_dists: np.ndarray,
    ):
        self.theta = theta
        self.mode = mode
        self._ids = ids
        self._emb = embeddings
        self._norms = norms
        self._indptr = indptr
        self._nbr_ids = nbr_ids
        self._nbr_dists = nbr_dists
        self._index = {int(i): pos for pos, i in enumerate(ids)}
        for arr in (ids, embeddings, norms, indptr, nbr_ids, nbr_dists):
            arr.setflags(write=False)

    def __contains__(self, item_id: int) -> bool:
        return item_id in self._index

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def node_ids(self) -> list[int]:
        return self._ids.tolist()

    @property
    def n_edges(self) -> int:
        return len(self._nbr_ids) // 2

    def _position(self, item_id: int) -> int:
        try:
            return self._index[item_id]
        except KeyError:
            raise KeyError(f"unknown item id {item_id}") from None

    def neighbors_within(self, item_id: int, radius: float) -> list[int]:
        """Neighbor ids with distance <= radius, ascending (distance, id)."""
        return [i for i, _ in self.neighbors_with_distances(item_id, radius)]

    def neighbors_with_distances(
        self, item_id: int, radius: float
    ) -> list[tuple[int, float]]:
        if radius > self.theta:
            raise ValueError(
                f"query radius {radius} exceeds graph threshold {self.theta}"
            )
        pos = self._position(item_id)
        lo, hi = int(self._indptr[pos]), int(self._indptr[pos + 1])
        cut = lo + int(
            np.searchsorted(self._nbr_dists[lo:hi], radius, side="right")
        )
        return [
            (int(self._nbr_ids[k]), float(self._nbr_dists[k])) for k in range(lo, cut)
        ]

    def distance(self, a_id: int, b_id: int) -> float:
        """Canonical cosine distance between two member items."""
        ia, ib = self._position(a_id), self._position(b_id)
        dot = float(np.einsum("i,i->", self._emb[ia], self._emb[ib]))
        dist = 1.0 - dot / (float(self._norms[ia]) * float(self._norms[ib]))
        return min(max(dist, 0.0), 2.0)

    def embedding_of(self, item_id: int) -> np.ndarray:
        return self._emb[self._position(item_id)]


def _pair_distances(
    emb: np.ndarray, norms: np.ndarray, ii: np.ndarray, jj: np.ndarray
) -> np.ndarray:
    dist = 1.0 - _dots(emb[ii], emb[jj]) / (norms[ii] * norms[jj])
    return np.clip(dist, 0.0, 2.0)


def _exact_candidates(
    emb: np.ndarray, sim_cut: float, workers: int
) -> tuple[np.ndarray, np.ndarray]:
    n = len(emb)
    chunk = max(1, min(n, (1 << 22) // max(n, 1)))
    starts = list(range(0, n, chunk))

    def scan(start: int) -> tuple[np.ndarray, np.ndarray]:
        stop = min(start + chunk, n)
        gram = emb[start:stop] @ emb.T
        mask = gram >= sim_cut
        # keep only j > i to emit each unordered pair once
        rows = np.arange(start, stop)
        mask &= np.arange(n)[None, :] > rows[:, None]
        local_i, local_j = np.nonzero(mask)
        return rows[local_i], local_j

    results = _run_sharded(scan, starts, workers)
    ii = np.concatenate([r[0] for r in results]) if results else np.empty(0, np.int64)
    jj = np.concatenate([r[1] for r in results]) if results else np.empty(0, np.int64)
    return ii.astype(np.int64), jj.astype(np.int64)


def _blocked_candidates(
    emb: np.ndarray,
    sim_cut: float,
    bands: int,
    band_bits: int,
    seed: int,
    workers: int,
) -> tuple[np.ndarray, np.ndarray]:
    n, d = emb.shape
    planes = np.random.default_rng(seed).standard_normal((d, bands * band_bits))
    bits = (emb @ planes) > 0
    weights = (np.uint64(1) << np.arange(band_bits, dtype=np.uint64))

    def scan(band: int) -> tuple[np.ndarray, np.ndarray]:
        keys = bits[:, band * band_bits : (band + 1) * band_bits].astype(np.uint64) @ weights
        order = np.argsort(keys, kind="stable")
        sorted_keys = keys[order]
        bounds = np.flatnonzero(np.diff(sorted_keys)) + 1
        starts = np.concatenate(([0], bounds))
        ends = np.concatenate((bounds, [n]))
        out_i: list[np.ndarray] = []
        out_j: list[np.ndarray] = []
        for s, e in zip(starts, ends):
            if e - s < 2:
                continue
            idx = np.sort(order[s:e])
            gram = emb[idx] @ emb[idx].T
            local_i, local_j = np.nonzero(np.triu(gram >= sim_cut, k=1))
            if len(local_i):
                out_i.append(idx[local_i])
                out_j.append(idx[local_j])
        if not out_i:
            return np.empty(0, np.int64), np.empty(0, np.int64)
        return np.concatenate(out_i), np.concatenate(out_j)

    results = _run_sharded(scan, list(range(bands)), workers)
    ii = np.concatenate([r[0] for r in results]) if results else np.empty(0, np.int64)
    jj = np.concatenate([r[1] for r in results]) if results else np.empty(0, np.int64)
    return ii.astype(np.int64), jj.astype(np.int64)


def _run_sharded(fn, shards: Sequence, workers: int) -> list:
    if workers <= 1 or len(shards) <= 1:
        return [fn(s) for s in shards]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, shards))


def build_graph(
    items: Sequence[Item],
    theta: float,
    mode: str = MODE_EXACT,
    *,
    bands: int = DEFAULT_BANDS,
    band_bits: int = DEFAULT_BAND_BITS,
    seed: int = 0,
    workers: int = 1,
) -> SimilarityGraph:
    """Build the similarity graph at radius theta over the given items.

    Blocked mode expects ``bands`` independent sign-hash bands of
    ``band_bits`` hyperplanes each; candidate pairs sharing any band bucket
    are verified exactly, so dropped edges are the only possible error.
    """
    if not 0.0 <= theta <= 2.0:
        raise ValueError(f"theta must be in [0, 2], got {theta}")
    if mode not in GRAPH_MODES:
        raise ValueError(f"unknown graph mode {mode!r}")
    if mode == MODE_BLOCKED and (bands < 1 or band_bits < 1 or band_bits > 62):
        raise ValueError("bands must be >= 1 and band_bits in [1, 62]")

    ids = np.array(sorted(item.item_id for item in items), dtype=np.int64)
    if len(np.unique(ids)) != len(ids):
        raise ValueError("duplicate item ids")
    by_id = {item.item_id: item for item in items}
    n = len(ids)
    if n == 0:
        empty = np.empty(0, dtype=np.int64)
        return SimilarityGraph(
            ids, np.empty((0, 0)), np.empty(0), theta, mode,
            np.zeros(1, dtype=np.int64), empty, np.empty(0),
        )
    emb = np.stack([by_id[int(i)].embedding for i in ids])
    norms = np.sqrt(_dots(emb, emb))
    if np.any(norms == 0.0):
        raise ValueError("zero embedding in graph input")

    sim_cut = 1.0 - theta - _DETECT_PAD
    if mode == MODE_EXACT:
        ii, jj = _exact_candidates(emb, sim_cut, workers)
    else:
        ii, jj = _blocked_candidates(emb, sim_cut, bands, band_bits, seed, workers)

    if len(ii):
        # dedupe candidates found in multiple bands, then decide membership
        # with the canonical kernel only
        enc = np.unique(ii * np.int64(n) + jj)
        ii, jj = enc // n, enc % n
        dists = _pair_distances(emb, norms, ii, jj)
        keep = dists <= theta
        ii, jj, dists = ii[keep], jj[keep], dists[keep]
    else:
        dists = np.empty(0)

    rows = np.concatenate([ii, jj])
    cols = np.concatenate([jj, ii])
    both = np.concatenate([dists, dists])
    order = np.lexsort((cols, both, rows))
    rows, cols, both = rows[order], cols[order], both[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    indptr[1:] = np.cumsum(np.bincount(rows, minlength=n))
    return SimilarityGraph(ids, emb, norms, theta, mode, indptr, ids[cols], both)


def dump_graph(graph: SimilarityGraph, path) -> None:
    """Debug dump: one JSON line per node with its full adjacency."""
    with open(path, "w", encoding="utf-8") as fh:
        for item_id in graph.node_ids:
            neighbors = [
                [nid, dist]
                for nid, dist in graph.neighbors_with_distances(item_id, graph.theta)
            ]
            fh.write(
                json.dumps({"id": item_id, "neighbors": neighbors},
                           separators=(",", ":"))
                + "\n"
            )
