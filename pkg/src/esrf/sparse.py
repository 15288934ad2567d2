"""Sparse directed-graph algebra and motif-induced user adjacencies.

All matrices are held in canonical CSR form (sorted, duplicate-free column
indices, no stored zeros).  The motif counts use the masked product
``(P @ Q) * T`` evaluated only on the sparsity pattern of ``T``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import InputError

MOTIF_IDS = tuple(f"M{k}" for k in range(1, 11))
# motifs whose C is already symmetric; the rest use C + C^T
SYMMETRIC_MOTIFS = frozenset({"M4", "M6", "M7", "M8", "M10"})
M10_MIN_EXCLUSIVE = 5.0

# upper bound on expanded partial products held at once by the kernels
_EXPANSION_BUDGET = 4_000_000


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    n_rows: int
    n_cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        ro, ci, va = self.row_offsets, self.col_indices, self.values
        if ro.shape != (self.n_rows + 1,) or ro[0] != 0 or ro[-1] != ci.size:
            raise InputError("row_offsets inconsistent with matrix shape")
        if np.any(np.diff(ro) < 0):
            raise InputError("row_offsets must be non-decreasing")
        if ci.size != va.size:
            raise InputError("col_indices and values differ in length")
        if ci.size:
            if ci.min() < 0 or ci.max() >= self.n_cols:
                raise InputError("column index out of range")
            rows = np.repeat(np.arange(self.n_rows), np.diff(ro))
            same_row = rows[1:] == rows[:-1]
            if np.any(same_row & (ci[1:] <= ci[:-1])):
                raise InputError("column indices must be strictly increasing within a row")
            if np.any(va == 0):
                raise InputError("explicit zeros are not allowed")
        for arr in (ro, ci, va):
            arr.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_rows, self.n_cols

    @property
    def nnz(self) -> int:
        return int(self.col_indices.size)

    def row_indices(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_rows), np.diff(self.row_offsets))

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.row_offsets[i], self.row_offsets[i + 1]
        return self.col_indices[lo:hi], self.values[lo:hi]

    def row_sums(self) -> np.ndarray:
        return np.bincount(self.row_indices(), weights=self.values, minlength=self.n_rows)

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.values.copy(), self.col_indices.copy(), self.row_offsets.copy()),
            shape=self.shape,
        )

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.row_indices(), self.col_indices] = self.values
        return out

    @classmethod
    def from_scipy(cls, m) -> "SparseMatrix":
        m = sp.csr_matrix(m, dtype=np.float64)
        m.sum_duplicates()
        m.eliminate_zeros()
        m.sort_indices()
        return cls(
            m.shape[0],
            m.shape[1],
            m.indptr.astype(np.int64),
            m.indices.astype(np.int64),
            m.data.astype(np.float64),
        )

    @classmethod
    def from_dense(cls, a) -> "SparseMatrix":
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2:
            raise InputError("dense input must be two-dimensional")
        rows, cols = np.nonzero(a)
        return _from_sorted_coo(a.shape[0], a.shape[1], rows, cols, a[rows, cols])

    @classmethod
    def zeros(cls, n_rows: int, n_cols: int) -> "SparseMatrix":
        return cls(
            n_rows,
            n_cols,
            np.zeros(n_rows + 1, dtype=np.int64),
            np.zeros(0, dtype=np.int64),
            np.zeros(0),
        )

    def transpose(self) -> "SparseMatrix":
        return SparseMatrix.from_scipy(self.to_scipy().T)

    @property
    def T(self) -> "SparseMatrix":
        return self.transpose()

    def __add__(self, other: "SparseMatrix") -> "SparseMatrix":
        _same_shape(self, other)
        return SparseMatrix.from_scipy(self.to_scipy() + other.to_scipy())

    def __sub__(self, other: "SparseMatrix") -> "SparseMatrix":
        _same_shape(self, other)
        return SparseMatrix.from_scipy(self.to_scipy() - other.to_scipy())

    def hadamard(self, other: "SparseMatrix") -> "SparseMatrix":
        _same_shape(self, other)
        return SparseMatrix.from_scipy(self.to_scipy().multiply(other.to_scipy()))

    def binarize(self) -> "SparseMatrix":
        return SparseMatrix(
            self.n_rows, self.n_cols, self.row_offsets, self.col_indices, np.ones(self.nnz)
        )

    def filter_values(self, keep: np.ndarray) -> "SparseMatrix":
        keep = np.asarray(keep, dtype=bool)
        rows = self.row_indices()[keep]
        return _from_sorted_coo(
            self.n_rows, self.n_cols, rows, self.col_indices[keep], self.values[keep]
        )

    def without_diagonal(self) -> "SparseMatrix":
        return self.filter_values(self.row_indices() != self.col_indices)

    def equals(self, other: "SparseMatrix") -> bool:
        return (
            self.shape == other.shape
            and np.array_equal(self.row_offsets, other.row_offsets)
            and np.array_equal(self.col_indices, other.col_indices)
            and np.array_equal(self.values, other.values)
        )

    def is_symmetric(self) -> bool:
        return self.n_rows == self.n_cols and self.equals(self.transpose())

    def __repr__(self) -> str:
        return f"SparseMatrix(shape={self.shape}, nnz={self.nnz})"


def _same_shape(a: SparseMatrix, b: SparseMatrix) -> None:
    if a.shape != b.shape:
        raise InputError(f"shape mismatch: {a.shape} vs {b.shape}")


def _from_sorted_coo(n_rows, n_cols, rows, cols, vals) -> SparseMatrix:
    """Build CSR from entries already sorted by (row, col) without duplicates or zeros."""
    counts = np.bincount(np.asarray(rows, dtype=np.int64), minlength=n_rows)
    offsets = np.zeros(n_rows + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return SparseMatrix(
        n_rows,
        n_cols,
        offsets,
        np.asarray(cols, dtype=np.int64),
        np.asarray(vals, dtype=np.float64),
    )


def csr_from_triplets(
    rows: int, cols: int, entries: Iterable[Sequence[float]]
) -> SparseMatrix:
    """Assemble a canonical CSR matrix from ``(row, col, weight)`` triplets.

    Duplicate coordinates are summed; entries summing to zero are dropped.
    """
    entries = list(entries)
    if not entries:
        return SparseMatrix.zeros(rows, cols)
    arr = np.asarray(entries, dtype=np.float64).reshape(-1, 3)
    r = arr[:, 0].astype(np.int64)
    c = arr[:, 1].astype(np.int64)
    bad = (r < 0) | (r >= rows) | (c < 0) | (c >= cols) | (arr[:, 0] != r) | (arr[:, 1] != c)
    if np.any(bad):
        k = int(np.flatnonzero(bad)[0])
        raise InputError(f"triplet {tuple(entries[k])} out of range for a {rows}x{cols} matrix")
    return _coalesce(rows, cols, r, c, arr[:, 2])


def _coalesce(n_rows, n_cols, r, c, v) -> SparseMatrix:
    keys = r * n_cols + c
    uniq, inverse = np.unique(keys, return_inverse=True)
    summed = np.bincount(inverse, weights=v, minlength=uniq.size)
    keep = summed != 0
    uniq = uniq[keep]
    return _from_sorted_coo(n_rows, n_cols, uniq // n_cols, uniq % n_cols, summed[keep])


def split_bidirectional(s: SparseMatrix) -> tuple[SparseMatrix, SparseMatrix]:
    """Return ``(B, U)``: mutual links ``S * S^T`` and one-way links ``S - B``."""
    if s.n_rows != s.n_cols:
        raise InputError("social matrix must be square")
    if np.any(s.values != 1):
        raise InputError("social matrix must be binary")
    b = s.hadamard(s.transpose())
    return b, s - b


def _ranges(starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Concatenate ``arange(start, start + count)`` for every pair."""
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    ends = np.cumsum(counts)
    shift = np.repeat(starts - (ends - counts), counts)
    return shift + np.arange(total, dtype=np.int64)


def _row_chunks(work: np.ndarray, rows: np.ndarray):
    """Split ``rows`` into consecutive groups whose summed ``work`` stays within budget."""
    if rows.size == 0:
        return
    cum = np.cumsum(work[rows])
    start = 0
    while start < rows.size:
        base = cum[start - 1] if start else 0
        stop = int(np.searchsorted(cum, base + _EXPANSION_BUDGET, side="right"))
        stop = max(stop, start + 1)
        yield rows[start:stop]
        start = stop


def _expand(p: SparseMatrix, q: SparseMatrix, rows: np.ndarray):
    """All partial products ``P[i,p] * Q[p,j]`` for the given rows of P."""
    p_counts = p.row_offsets[rows + 1] - p.row_offsets[rows]
    p_idx = _ranges(p.row_offsets[rows], p_counts)
    pr = np.repeat(rows, p_counts)
    pc = p.col_indices[p_idx]
    pv = p.values[p_idx]
    q_counts = q.row_offsets[pc + 1] - q.row_offsets[pc]
    q_idx = _ranges(q.row_offsets[pc], q_counts)
    er = np.repeat(pr, q_counts)
    ec = q.col_indices[q_idx]
    ev = np.repeat(pv, q_counts) * q.values[q_idx]
    return er, ec, ev


def _flops_per_row(p: SparseMatrix, q: SparseMatrix) -> np.ndarray:
    q_len = np.diff(q.row_offsets)
    per_entry = q_len[p.col_indices]
    return np.bincount(p.row_indices(), weights=per_entry, minlength=p.n_rows)


def masked_sparse_product(p: SparseMatrix, q: SparseMatrix, t: SparseMatrix) -> SparseMatrix:
    """Compute ``(P @ Q) * T`` touching only rows where the mask ``T`` has entries.

    Partial products are expanded row by row (Gustavson order), filtered to
    the mask pattern by binary search and reduced onto the mask entries, so
    the output is produced directly in the mask's sorted order.
    """
    if p.n_cols != q.n_rows or t.shape != (p.n_rows, q.n_cols):
        raise InputError(
            f"cannot form ({p.shape} @ {q.shape}) * {t.shape}: dimensions not conformable"
        )
    n_cols = t.n_cols
    mask_rows = np.flatnonzero(np.diff(t.row_offsets))
    work = _flops_per_row(p, q)
    out_vals = np.zeros(t.nnz)
    t_rows = t.row_indices()
    for rows in _row_chunks(work, mask_rows):
        lo, hi = t.row_offsets[rows[0]], t.row_offsets[rows[-1] + 1]
        mask_keys = t_rows[lo:hi] * n_cols + t.col_indices[lo:hi]
        er, ec, ev = _expand(p, q, rows)
        if er.size == 0:
            continue
        keys = er * n_cols + ec
        pos = np.searchsorted(mask_keys, keys)
        pos_c = np.minimum(pos, mask_keys.size - 1)
        hit = mask_keys[pos_c] == keys
        acc = np.bincount(pos_c[hit], weights=ev[hit], minlength=mask_keys.size)
        out_vals[lo:hi] = acc * t.values[lo:hi]
    keep = out_vals != 0
    return _from_sorted_coo(t.n_rows, n_cols, t_rows[keep], t.col_indices[keep], out_vals[keep])


def sparse_product(p: SparseMatrix, q: SparseMatrix) -> SparseMatrix:
    """Unmasked ``P @ Q`` using the same expand-and-reduce kernel."""
    if p.n_cols != q.n_rows:
        raise InputError(f"cannot multiply {p.shape} by {q.shape}")
    work = _flops_per_row(p, q)
    parts = []
    for rows in _row_chunks(work, np.flatnonzero(work)):
        er, ec, ev = _expand(p, q, rows)
        keys = er * q.n_cols + ec
        uniq, inv = np.unique(keys, return_inverse=True)
        parts.append((uniq, np.bincount(inv, weights=ev, minlength=uniq.size)))
    if not parts:
        return SparseMatrix.zeros(p.n_rows, q.n_cols)
    keys = np.concatenate([k for k, _ in parts])
    vals = np.concatenate([v for _, v in parts])
    keep = vals != 0
    keys, vals = keys[keep], vals[keep]
    return _from_sorted_coo(p.n_rows, q.n_cols, keys // q.n_cols, keys % q.n_cols, vals)


def _motif_key(motif_id) -> str:
    key = f"M{motif_id}" if isinstance(motif_id, (int, np.integer)) else str(motif_id).upper()
    if key not in MOTIF_IDS:
        raise InputError(f"unknown motif id {motif_id!r}; expected one of M1..M10")
    return key


class _MotifContext:
    """Shared operands for the ten motif formulas (computed lazily)."""

    def __init__(self, s: SparseMatrix, y: SparseMatrix):
        if y.n_rows != s.n_rows:
            raise InputError("feedback and social matrices disagree on the number of users")
        self.b, self.u = split_bidirectional(s)
        self.ut = self.u.transpose()
        self.y = y
        self._yt = None
        self._coread = None

    @property
    def yt(self) -> SparseMatrix:
        if self._yt is None:
            self._yt = self.y.transpose()
        return self._yt

    def coread(self) -> SparseMatrix:
        if self._coread is None:
            self._coread = sparse_product(self.y, self.yt)
        return self._coread

    def raw(self, key: str) -> SparseMatrix:
        b, u, ut = self.b, self.u, self.ut
        mp = masked_sparse_product

        def total(*terms):
            out = terms[0]
            for t in terms[1:]:
                out = out + t
            return out

        if key == "M1":
            return mp(u, u, ut)
        if key == "M2":
            return total(mp(b, u, ut), mp(u, b, ut), mp(u, u, b))
        if key == "M3":
            return total(mp(b, b, u), mp(b, u, b), mp(u, b, b))
        if key == "M4":
            return mp(b, b, b)
        if key == "M5":
            return total(mp(u, u, u), mp(u, ut, u), mp(ut, u, u))
        if key == "M6":
            return total(mp(u, b, u), mp(b, ut, ut), mp(ut, u, b))
        if key == "M7":
            return total(mp(ut, b, ut), mp(b, u, u), mp(u, ut, b))
        if key == "M8":
            return mp(self.y, self.yt, b)
        if key == "M9":
            return mp(self.y, self.yt, u)
        return self.coread()

    def adjacency(self, key: str) -> SparseMatrix:
        c = self.raw(key)
        a = c if key in SYMMETRIC_MOTIFS else c + c.transpose()
        a = a.without_diagonal()
        if key == "M10":
            a = a.filter_values(a.values > M10_MIN_EXCLUSIVE)
        return a


def motif_adjacency(s: SparseMatrix, y: SparseMatrix, motif_id) -> SparseMatrix:
    """Motif-induced user adjacency: entry (i, j) counts motif instances holding both users.

    ``motif_id`` accepts ``"M1"``..``"M10"`` or the integers 1..10.
    """
    key = _motif_key(motif_id)
    return _MotifContext(s, y).adjacency(key)


def all_motif_adjacencies(s: SparseMatrix, y: SparseMatrix) -> dict[str, SparseMatrix]:
    ctx = _MotifContext(s, y)
    return {key: ctx.adjacency(key) for key in MOTIF_IDS}


@dataclass(frozen=True, eq=False)
class MotifSet:
    motif_matrices: dict
    combined: SparseMatrix
    normalized: SparseMatrix


def row_normalize(a: SparseMatrix) -> SparseMatrix:
    """``D^-1 A`` where empty rows first receive a unit self-loop."""
    if a.n_rows != a.n_cols:
        raise InputError("adjacency must be square")
    sums = a.row_sums()
    isolated = np.flatnonzero(sums == 0)
    if isolated.size:
        loops = sp.csr_matrix(
            (np.ones(isolated.size), (isolated, isolated)), shape=a.shape
        )
        a = SparseMatrix.from_scipy(a.to_scipy() + loops)
        sums = a.row_sums()
    vals = a.values / sums[a.row_indices()]
    return SparseMatrix(a.n_rows, a.n_cols, a.row_offsets, a.col_indices, vals)


def combined_adjacency(s: SparseMatrix, motifs: dict, binarize: bool = False) -> MotifSet:
    """Sum S with the motif adjacencies and row-normalise the result.

    With ``binarize`` every motif matrix contributes 0/1 entries instead of
    instance counts.
    """
    combined = s
    for key in sorted(motifs, key=lambda k: int(str(k)[1:])):
        m = motifs[key]
        if m.shape != s.shape:
            raise InputError(f"motif {key} has shape {m.shape}, expected {s.shape}")
        combined = combined + (m.binarize() if binarize else m)
    return MotifSet(dict(motifs), combined, row_normalize(combined))


def build_motif_set(s: SparseMatrix, y: SparseMatrix, binarize: bool = False) -> MotifSet:
    return combined_adjacency(s, all_motif_adjacencies(s, y), binarize=binarize)
