"""Spatial graphs over grids (local) and over trajectories + users (global).

The local graph connects grid cells by consecutive-transition counts across
all trajectories. The global graph is heterogeneous: trajectory nodes for
every split (the model predicts from a node's embedding, so test
trajectories must be present), user nodes attached only to training
trajectories. Trajectory-trajectory weights count shared grids and are
computed as the incidence self-product C @ C.T rather than by pairwise
scans.

On-disk format is a line-oriented text file: a small header, the node
roster, then one or two integer COO sections in row-major order. Weights
are integers throughout, so round-trips are exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DataError
from .mobility import GridSequence

FORMAT_VERSION = 1


@dataclass
class LocalSpatialGraph:
    n_grids: int
    adjacency: sp.csr_matrix  # symmetric, zero diagonal, int64 weights
    features: sp.csr_matrix   # one-hot identity

    @property
    def n_edges(self) -> int:
        return self.adjacency.nnz // 2

    @property
    def max_weight(self) -> int:
        return int(self.adjacency.data.max()) if self.adjacency.nnz else 0


@dataclass
class GlobalSpatialGraph:
    traj_ids: list[str]
    user_ids: list[str]
    adjacency: sp.csr_matrix  # (T+U) x (T+U), symmetric, zero diagonal
    features: sp.csr_matrix   # (T+U) x n_grids multi-hot

    @property
    def trajectory_count(self) -> int:
        return len(self.traj_ids)

    @property
    def user_count(self) -> int:
        return len(self.user_ids)

    @property
    def n_nodes(self) -> int:
        return len(self.traj_ids) + len(self.user_ids)

    @property
    def n_edges(self) -> int:
        return self.adjacency.nnz // 2

    @property
    def max_weight(self) -> int:
        return int(self.adjacency.data.max()) if self.adjacency.nnz else 0


def build_local_graph(sequences: Iterable[GridSequence], n_grids: int) -> LocalSpatialGraph:
    """Grid graph weighted by how many trajectories make each transition.

    An unordered grid pair (g, h), g != h, gains weight one per trajectory
    containing at least one consecutive step between g and h in either
    direction. Consecutive repeats of the same grid contribute nothing.
    """
    counts: dict[tuple[int, int], int] = {}
    for seq in sequences:
        pairs = set()
        for a, b in zip(seq.grid, seq.grid[1:]):
            if a != b:
                pairs.add((a, b) if a < b else (b, a))
        for pair in pairs:
            counts[pair] = counts.get(pair, 0) + 1
    rows, cols, data = [], [], []
    for (a, b), w in counts.items():
        rows.extend((a, b))
        cols.extend((b, a))
        data.extend((w, w))
    adj = sp.coo_matrix(
        (np.asarray(data, dtype=np.int64), (rows, cols)), shape=(n_grids, n_grids)
    ).tocsr()
    adj.sort_indices()
    return LocalSpatialGraph(n_grids, adj, sp.identity(n_grids, dtype=np.int64, format="csr"))


def build_grid_incidence(sequences: Sequence[GridSequence], n_grids: int) -> sp.csr_matrix:
    """Binary trajectories-by-grids visitation matrix, rows in roster order."""
    rows, cols = [], []
    for i, seq in enumerate(sequences):
        for g in sorted(set(seq.grid)):
            rows.append(i)
            cols.append(g)
    inc = sp.coo_matrix(
        (np.ones(len(rows), dtype=np.int64), (rows, cols)),
        shape=(len(sequences), n_grids),
    ).tocsr()
    inc.sort_indices()
    return inc


def build_global_graph(
    incidence: sp.csr_matrix,
    traj_ids: Sequence[str],
    train_labels: Mapping[str, str],
) -> GlobalSpatialGraph:
    """Heterogeneous trajectory + user graph from the visitation incidence.

    Trajectory-trajectory weights are |shared grids|, computed as the
    incidence self-product with the diagonal zeroed (a trajectory's grid
    count is self-similarity, not an edge). Each training trajectory links
    to its user with the maximum trajectory-trajectory weight (1 when that
    maximum is 0); users get no edges among themselves. User feature rows
    are the union of their training trajectories' visitation rows.
    """
    n_traj = len(traj_ids)
    if incidence.shape[0] != n_traj:
        raise ValueError(
            f"incidence has {incidence.shape[0]} rows for {n_traj} trajectories"
        )
    index_of = {tid: i for i, tid in enumerate(traj_ids)}
    for tid in train_labels:
        if tid not in index_of:
            raise DataError(f"label references unknown trajectory {tid!r}")
    user_ids = sorted(set(train_labels.values()))
    user_index = {u: k for k, u in enumerate(user_ids)}
    n_users = len(user_ids)
    n_nodes = n_traj + n_users

    traj_block = (incidence @ incidence.T).tocoo()
    keep = traj_block.row != traj_block.col
    rows = list(traj_block.row[keep])
    cols = list(traj_block.col[keep])
    data = list(traj_block.data[keep])
    w_max = int(max(data)) if data else 0
    if w_max == 0:
        w_max = 1

    for tid, user in train_labels.items():
        ti = index_of[tid]
        uj = n_traj + user_index[user]
        rows.extend((ti, uj))
        cols.extend((uj, ti))
        data.extend((w_max, w_max))

    adj = sp.coo_matrix(
        (np.asarray(data, dtype=np.int64), (rows, cols)), shape=(n_nodes, n_nodes)
    ).tocsr()
    adj.sort_indices()

    user_rows = sp.lil_matrix((n_users, incidence.shape[1]), dtype=np.int64)
    for tid, user in train_labels.items():
        user_rows[user_index[user]] = user_rows[user_index[user]].maximum(
            incidence[index_of[tid]]
        )
    features = sp.vstack([incidence.astype(np.int64), user_rows.tocsr()]).tocsr()
    features.sort_indices()
    return GlobalSpatialGraph(list(traj_ids), user_ids, adj, features)


def symmetric_normalize(adjacency: sp.spmatrix) -> sp.csr_matrix:
    """Self-loop-augmented symmetric normalization D^-1/2 (A + I) D^-1/2.

    Row sums of A + I are at least one, so the result is always finite. The
    per-entry scale is computed as dinv[i] * dinv[j] before multiplying by
    the weight, which keeps the stored matrix exactly symmetric bit for bit.
    """
    n, m = adjacency.shape
    if n != m:
        raise ValueError(f"adjacency must be square, got {n}x{m}")
    if (adjacency != adjacency.T).nnz != 0:
        raise ValueError("adjacency must be symmetric")
    a_tilde = (adjacency.astype(np.float64) + sp.identity(n, format="csr")).tocoo()
    deg = np.asarray(a_tilde.sum(axis=1)).ravel()
    dinv = 1.0 / np.sqrt(deg)
    data = a_tilde.data * (dinv[a_tilde.row] * dinv[a_tilde.col])
    out = sp.coo_matrix((data, (a_tilde.row, a_tilde.col)), shape=(n, n)).tocsr()
    out.sort_indices()
    return out


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _write_coo(fh, name: str, m: sp.spmatrix) -> None:
    coo = m.tocoo()
    order = np.lexsort((coo.col, coo.row))
    fh.write(f"matrix {name} {m.shape[0]} {m.shape[1]} {coo.nnz}\n")
    for r, c, w in zip(coo.row[order], coo.col[order], coo.data[order]):
        fh.write(f"{r} {c} {int(w)}\n")


def _read_coo(lines, expect_name: str) -> sp.csr_matrix:
    tag, name, rows, cols, nnz = next(lines).split()
    if tag != "matrix" or name != expect_name:
        raise DataError(f"expected matrix section {expect_name!r}, found {name!r}")
    rows, cols, nnz = int(rows), int(cols), int(nnz)
    r = np.empty(nnz, dtype=np.int64)
    c = np.empty(nnz, dtype=np.int64)
    w = np.empty(nnz, dtype=np.int64)
    for i in range(nnz):
        a, b, v = next(lines).split()
        r[i], c[i], w[i] = int(a), int(b), int(v)
    out = sp.coo_matrix((w, (r, c)), shape=(rows, cols)).tocsr()
    out.sort_indices()
    return out


def save_local_graph(g: LocalSpatialGraph, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(f"tulink-graph {FORMAT_VERSION}\n")
        fh.write("kind local\n")
        fh.write(f"nodes {g.n_grids}\n")
        fh.write(f"edges {g.n_edges}\n")
        fh.write(f"max_weight {g.max_weight}\n")
        fh.write("symmetric 1\n")
        fh.write(f"roster {g.n_grids}\n")
        for i in range(g.n_grids):
            fh.write(f"{i}\n")
        _write_coo(fh, "adjacency", g.adjacency)
        fh.write("end\n")


def load_local_graph(path: str | Path) -> LocalSpatialGraph:
    header, _ = _read_header(path)
    n = int(header["nodes"])
    lines = header["_lines"]
    adj = _read_coo(lines, "adjacency")
    if next(lines).strip() != "end":
        raise DataError(f"truncated graph file {path}")
    return LocalSpatialGraph(n, adj, sp.identity(n, dtype=np.int64, format="csr"))


def save_global_graph(g: GlobalSpatialGraph, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(f"tulink-graph {FORMAT_VERSION}\n")
        fh.write("kind global\n")
        fh.write(f"nodes {g.n_nodes}\n")
        fh.write(f"trajectories {g.trajectory_count}\n")
        fh.write(f"users {g.user_count}\n")
        fh.write(f"edges {g.n_edges}\n")
        fh.write(f"max_weight {g.max_weight}\n")
        fh.write("symmetric 1\n")
        fh.write(f"roster {g.n_nodes}\n")
        for tid in g.traj_ids:
            fh.write(f"{tid}\n")
        for uid in g.user_ids:
            fh.write(f"{uid}\n")
        _write_coo(fh, "adjacency", g.adjacency)
        _write_coo(fh, "features", g.features)
        fh.write("end\n")


def _read_header(path: str | Path):
    lines = iter(Path(path).read_text(encoding="utf-8").splitlines())
    magic = next(lines).split()
    if magic[0] != "tulink-graph" or int(magic[1]) != FORMAT_VERSION:
        raise DataError(f"{path} is not a version-{FORMAT_VERSION} graph file")
    header: dict = {}
    roster: list[str] = []
    for line in lines:
        key, value = line.split(maxsplit=1)
        if key == "roster":
            for _ in range(int(value)):
                roster.append(next(lines))
            break
        header[key] = value
    header["_lines"] = lines
    return header, roster


def load_global_graph(path: str | Path) -> GlobalSpatialGraph:
    header, roster = _read_header(path)
    n_traj = int(header["trajectories"])
    lines = header["_lines"]
    adj = _read_coo(lines, "adjacency")
    features = _read_coo(lines, "features")
    if next(lines).strip() != "end":
        raise DataError(f"truncated graph file {path}")
    return GlobalSpatialGraph(roster[:n_traj], roster[n_traj:], adj, features)
