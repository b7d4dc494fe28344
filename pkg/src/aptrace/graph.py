"""Time-varying AP-colocation contact graph.

For a query epoch t, every AP/epoch cell (k, t') inside the look-back window
[t - tau_g, t] contributes 1 / N^alpha to each unordered pair of the N users
seen on that AP during that epoch; pair contributions sum into edge weights.
alpha = 0 counts shared AP-epochs; alpha = 1 discounts crowded APs.

Builds are deterministic to the bit regardless of thread count: per-cell pair
multiplicities are aggregated as exact integer counts per distinct cell size,
and the float combination per edge always runs in ascending-size order.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import Iterator, TextIO

import numpy as np

from .ingest import Records

# Node codes are bit-packed in pairs; bounds the supported vocabulary.
_CODE_BITS = 21
_MAX_NODES = 1 << _CODE_BITS

# Fixed work partitioning (independent of thread count, so results are too).
_GROUPS_PER_CHUNK = 200_000


@dataclass(frozen=True)
class GraphParams:
    """Look-back duration (epochs) and crowd-scaling exponent."""

    tau_g: int
    alpha: float = 1.0

    def __post_init__(self) -> None:
        if self.tau_g <= 0:
            raise ValueError(f"tau_g must be positive, got {self.tau_g}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")


@dataclass(frozen=True)
class ContactGraph:
    """Weighted undirected colocation graph snapshot at epoch ``as_of``.

    Edges are stored once with endpoint codes i < j; codes index ``users``,
    which is lexicographically sorted so code order equals id order.
    """

    as_of: int
    tau_g: int
    alpha: float
    users: tuple[str, ...]
    edge_i: np.ndarray  # int32
    edge_j: np.ndarray  # int32
    weights: np.ndarray  # float64

    @property
    def node_count(self) -> int:
        return len(self.users)

    @property
    def edge_count(self) -> int:
        return len(self.weights)

    @property
    def nodes(self) -> frozenset[str]:
        return frozenset(self.users)

    @cached_property
    def _code_of(self) -> dict[str, int]:
        return {u: i for i, u in enumerate(self.users)}

    @cached_property
    def _adjacency(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """CSR-style (indptr, neighbor codes, weights) over both edge directions."""
        n = self.node_count
        src = np.concatenate([self.edge_i, self.edge_j])
        dst = np.concatenate([self.edge_j, self.edge_i])
        w = np.concatenate([self.weights, self.weights])
        order = np.lexsort((dst, src))
        src, dst, w = src[order], dst[order], w[order]
        indptr = np.searchsorted(src, np.arange(n + 1))
        return indptr, dst, w

    def weight(self, user_i: str, user_j: str) -> float:
        """Edge weight between two users; 0.0 when absent (incl. self-pairs)."""
        ci = self._code_of.get(user_i)
        cj = self._code_of.get(user_j)
        if ci is None or cj is None or ci == cj:
            return 0.0
        indptr, dst, w = self._adjacency
        lo, hi = indptr[ci], indptr[ci + 1]
        pos = lo + np.searchsorted(dst[lo:hi], cj)
        if pos < hi and dst[pos] == cj:
            return float(w[pos])
        return 0.0

    def neighbor_weights(self, user: str) -> dict[str, float]:
        """All neighbors of a user with their edge weights."""
        code = self._code_of.get(user)
        if code is None:
            return {}
        indptr, dst, w = self._adjacency
        lo, hi = indptr[code], indptr[code + 1]
        return {self.users[c]: float(x) for c, x in zip(dst[lo:hi], w[lo:hi])}

    def edge_items(self) -> Iterator[tuple[str, str, float]]:
        for i, j, w in zip(self.edge_i, self.edge_j, self.weights):
            yield self.users[i], self.users[j], float(w)

    def edge_dict(self) -> dict[tuple[str, str], float]:
        return {(u, v): w for u, v, w in self.edge_items()}

    def write_csv(self, stream: TextIO) -> None:
        """Serialize edges as ``user_i,user_j,weight`` with i < j lexicographically."""
        stream.write("user_i,user_j,weight\n")
        for u, v, w in self.edge_items():
            stream.write(f"{u},{v},{w!r}\n")

    def sidecar(self) -> dict[str, object]:
        return {
            "as_of": self.as_of,
            "tau_g": self.tau_g,
            "alpha": self.alpha,
            "node_count": self.node_count,
            "edge_count": self.edge_count,
        }

    def write_sidecar(self, stream: TextIO) -> None:
        json.dump(self.sidecar(), stream, sort_keys=True)
        stream.write("\n")


def neighbors_above(graph: ContactGraph, user: str, gamma: float) -> set[tuple[str, float]]:
    """Neighbors of ``user`` whose edge weight is >= gamma (inclusive)."""
    return {(v, w) for v, w in graph.neighbor_weights(user).items() if w >= gamma}


def _pair_counts_for_chunk(
    user_sorted: np.ndarray,
    starts: np.ndarray,
    sizes: np.ndarray,
    alpha: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Aggregate one chunk of (ap, epoch) cells into per-edge weights.

    Pairs are counted exactly per distinct cell size n, then combined as
    count * n**-alpha in ascending-n order, making the result independent of
    how cells are ordered inside the chunk.
    """
    keys_parts: list[np.ndarray] = []
    weight_parts: list[np.ndarray] = []
    for n in np.unique(sizes):
        n = int(n)
        if n < 2:
            continue
        sel = starts[sizes == n]
        members = user_sorted[sel[:, None] + np.arange(n)[None, :]]
        iu, ju = np.triu_indices(n, k=1)
        keys = (members[:, iu].astype(np.int64) << _CODE_BITS) | members[:, ju]
        uniq, counts = np.unique(keys.ravel(), return_counts=True)
        keys_parts.append(uniq)
        weight_parts.append(counts * float(n) ** -alpha)
    if not keys_parts:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
    keys = np.concatenate(keys_parts)
    weights = np.concatenate(weight_parts)
    return _sum_by_key(keys, weights)


def _sum_by_key(keys: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sum values per key, preserving input order within equal keys."""
    order = np.argsort(keys, kind="stable")
    keys = keys[order]
    values = values[order]
    boundary = np.ones(len(keys), dtype=bool)
    boundary[1:] = keys[1:] != keys[:-1]
    starts = np.flatnonzero(boundary)
    return keys[starts], np.add.reduceat(values, starts)


def build_graph(
    records: Records,
    t: int,
    params: GraphParams,
    threads: int = 1,
) -> ContactGraph:
    """Build the contact graph G(t) from colocation records.

    Nodes are the users observed in the window [t - tau_g, t]; an edge (i, j)
    carries the sum over window cells (k, t') of 1 / N_{k,t'}**alpha where
    N_{k,t'} is the number of distinct users on AP k during epoch t'.
    """
    t = int(t)
    mask = (records.epoch >= t - params.tau_g) & (records.epoch <= t)
    user = records.user_code[mask].astype(np.int64)
    ap = records.ap_code[mask].astype(np.int64)
    epoch = records.epoch[mask]

    node_codes = np.unique(user)
    users = tuple(records.users[c] for c in node_codes)
    if len(users) >= _MAX_NODES:
        raise ValueError(f"too many users in window ({len(users)} >= {_MAX_NODES})")
    if len(users) == 0:
        return ContactGraph(
            as_of=t,
            tau_g=params.tau_g,
            alpha=params.alpha,
            users=(),
            edge_i=np.empty(0, dtype=np.int32),
            edge_j=np.empty(0, dtype=np.int32),
            weights=np.empty(0, dtype=np.float64),
        )
    local = np.searchsorted(node_codes, user)

    # Records are stored sorted by (ap, epoch, user), so window cells are
    # contiguous runs and members within a cell are already user-sorted.
    cell_change = np.ones(len(local), dtype=bool)
    cell_change[1:] = (ap[1:] != ap[:-1]) | (epoch[1:] != epoch[:-1])
    starts = np.flatnonzero(cell_change)
    sizes = np.diff(np.append(starts, len(local)))

    n_chunks = max(1, -(-len(starts) // _GROUPS_PER_CHUNK))
    bounds = np.linspace(0, len(starts), n_chunks + 1).astype(np.int64)
    chunks = [
        (starts[lo:hi], sizes[lo:hi]) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo
    ]

    def run(chunk: tuple[np.ndarray, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        return _pair_counts_for_chunk(local, chunk[0], chunk[1], params.alpha)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]

    keys = np.concatenate([p[0] for p in parts])
    weights = np.concatenate([p[1] for p in parts])
    if len(keys):
        keys, weights = _sum_by_key(keys, weights)
    edge_i = (keys >> _CODE_BITS).astype(np.int32)
    edge_j = (keys & (_MAX_NODES - 1)).astype(np.int32)
    return ContactGraph(
        as_of=t,
        tau_g=params.tau_g,
        alpha=params.alpha,
        users=users,
        edge_i=edge_i,
        edge_j=edge_j,
        weights=weights,
    )


def subsample_users(records: Records, keep_fraction: float, seed: int) -> Records:
    """Retain a uniformly random fraction of users (selection by user).

    Keeps floor(keep_fraction * n_users) users; deterministic for a fixed
    seed.  All records of dropped users are removed, so downstream per-cell
    counts N reflect only the retained population.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    n = len(records.users)
    n_keep = int(np.floor(keep_fraction * n))
    if n_keep >= n:
        return records
    rng = np.random.default_rng(seed)
    kept = rng.choice(n, size=n_keep, replace=False)
    keep_ids = {records.users[i] for i in kept}
    return records.subset_users(keep_ids)


class SnapshotProvider:
    """Callable epoch -> ContactGraph with memoization of built snapshots."""

    def __init__(self, records: Records, params: GraphParams, threads: int = 1) -> None:
        self.records = records
        self.params = params
        self.threads = threads
        self._cache: dict[int, ContactGraph] = {}

    def __call__(self, t: int) -> ContactGraph:
        t = int(t)
        graph = self._cache.get(t)
        if graph is None:
            graph = build_graph(self.records, t, self.params, threads=self.threads)
            self._cache[t] = graph
        return graph
