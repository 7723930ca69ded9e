"""Sparse matrices in CRS form: Matrix Market I/O, synthetic generators,
row partitioning and the rank-to-rank halo volumes an SpMVM induces.
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .trace import atomic_write


class MatrixError(ValueError):
    pass


class ParseError(MatrixError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DimensionMismatch(MatrixError):
    pass


class InfeasibleDensity(MatrixError):
    pass


class TooManyRanks(MatrixError):
    pass


class InconsistentCommMatrix(MatrixError):
    pass


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    n_rows: int
    n_cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: Optional[np.ndarray] = None
    symmetric: bool = False

    def __post_init__(self):
        rp = np.asarray(self.row_ptr, dtype=np.int64)
        ci = np.asarray(self.col_idx, dtype=np.int64)
        object.__setattr__(self, "row_ptr", rp)
        object.__setattr__(self, "col_idx", ci)
        if self.values is not None:
            object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if rp.shape != (self.n_rows + 1,) or rp[0] != 0 or np.any(np.diff(rp) < 0):
            raise MatrixError("row_ptr must be non-decreasing, start at 0, length n_rows+1")
        if rp[-1] != len(ci):
            raise MatrixError("row_ptr[-1] must equal len(col_idx)")
        if len(ci) and (ci.min() < 0 or ci.max() >= self.n_cols):
            raise MatrixError("column index out of range")
        if self.values is not None and len(self.values) != len(ci):
            raise MatrixError("values and col_idx lengths differ")

    @property
    def n_nz(self) -> int:
        return int(self.row_ptr[-1])

    def row_nnz(self) -> np.ndarray:
        return np.diff(self.row_ptr)

    def rows(self) -> np.ndarray:
        """Row index of every stored entry."""
        return np.repeat(np.arange(self.n_rows), self.row_nnz())

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseMatrix):
            return NotImplemented
        same_vals = (self.values is None and other.values is None) or (
            self.values is not None and other.values is not None
            and np.array_equal(self.values, other.values))
        return (self.n_rows == other.n_rows and self.n_cols == other.n_cols
                and self.symmetric == other.symmetric
                and np.array_equal(self.row_ptr, other.row_ptr)
                and np.array_equal(self.col_idx, other.col_idx) and same_vals)


def from_coo(n_rows: int, n_cols: int, rows, cols, values=None,
             symmetric: bool = False) -> SparseMatrix:
    """CRS matrix from coordinate entries; columns sorted within each row."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if len(rows) and (rows.min() < 0 or rows.max() >= n_rows):
        raise DimensionMismatch("row index out of range")
    if len(cols) and (cols.min() < 0 or cols.max() >= n_cols):
        raise DimensionMismatch("column index out of range")
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    vals = None if values is None else np.asarray(values, dtype=float)[order]
    row_ptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n_rows), out=row_ptr[1:])
    return SparseMatrix(n_rows, n_cols, row_ptr, cols, vals, symmetric)


@dataclass(frozen=True)
class MatrixStats:
    n_r: int
    n_nz: int
    n_nzr: float
    bandwidth: int
    size_bytes: int


def size_bytes(n_r: int, n_nz: int) -> int:
    """CRS footprint with 8-byte values and 4-byte indices."""
    return 12 * n_nz + 4 * n_r


def stats(m: SparseMatrix) -> MatrixStats:
    bw = int(np.max(np.abs(m.col_idx - m.rows()))) if m.n_nz else 0
    nzr = m.n_nz / m.n_rows if m.n_rows else 0.0
    return MatrixStats(m.n_rows, m.n_nz, nzr, bw, size_bytes(m.n_rows, m.n_nz))


# -- Matrix Market ---------------------------------------------------------------

def parse_matrix_market(text: str) -> SparseMatrix:
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty file", 1)
    head = lines[0].split()
    if len(head) != 5 or head[0] != "%%MatrixMarket" or head[1].lower() != "matrix":
        raise ParseError("missing %%MatrixMarket matrix header", 1)
    fmt, field, sym = (h.lower() for h in head[2:])
    if fmt != "coordinate":
        raise ParseError(f"only coordinate format is supported, got {fmt!r}", 1)
    if field not in ("real", "integer", "pattern"):
        raise ParseError(f"unsupported field {field!r}", 1)
    if sym not in ("general", "symmetric"):
        raise ParseError(f"unsupported symmetry {sym!r}", 1)
    i = 1
    while i < len(lines) and (not lines[i].strip() or lines[i].lstrip().startswith("%")):
        i += 1
    if i == len(lines):
        raise ParseError("missing size line", i + 1)
    try:
        n_r, n_c, nnz = (int(x) for x in lines[i].split())
    except ValueError:
        raise ParseError("size line must hold three integers", i + 1) from None
    rows, cols, vals = [], [], []
    width = 2 if field == "pattern" else 3
    for lineno in range(i + 2, len(lines) + 1):
        line = lines[lineno - 1].strip()
        if not line or line.startswith("%"):
            continue
        f = line.split()
        if len(f) != width:
            raise ParseError(f"expected {width} fields, got {len(f)}", lineno)
        try:
            r, c = int(f[0]) - 1, int(f[1]) - 1
            v = float(f[2]) if width == 3 else 1.0
        except ValueError:
            raise ParseError(f"malformed entry {line!r}", lineno) from None
        if not (0 <= r < n_r and 0 <= c < n_c):
            raise DimensionMismatch(f"line {lineno}: entry ({r + 1}, {c + 1}) outside "
                                    f"{n_r}x{n_c}")
        if sym == "symmetric" and c > r:
            raise ParseError("symmetric files store the lower triangle only", lineno)
        rows.append(r)
        cols.append(c)
        vals.append(v)
    if len(rows) != nnz:
        raise DimensionMismatch(f"size line declares {nnz} entries, file holds {len(rows)}")
    rows_a, cols_a, vals_a = np.array(rows, np.int64), np.array(cols, np.int64), np.array(vals)
    if sym == "symmetric":
        if n_r != n_c:
            raise DimensionMismatch("symmetric matrix must be square")
        off = rows_a != cols_a
        rows_a, cols_a = (np.concatenate([rows_a, cols_a[off]]),
                          np.concatenate([cols_a, rows_a[off]]))
        vals_a = np.concatenate([vals_a, vals_a[off]])
    return from_coo(n_r, n_c, rows_a, cols_a, None if field == "pattern" else vals_a,
                    symmetric=sym == "symmetric")


def load_matrix_market(path: str) -> SparseMatrix:
    with open(path) as fh:
        return parse_matrix_market(fh.read())


def format_matrix_market(m: SparseMatrix) -> str:
    buf = io.StringIO()
    field = "pattern" if m.values is None else "real"
    sym = "symmetric" if m.symmetric else "general"
    rows, cols = m.rows(), m.col_idx
    keep = cols <= rows if m.symmetric else np.ones(len(cols), bool)
    buf.write(f"%%MatrixMarket matrix coordinate {field} {sym}\n")
    buf.write(f"{m.n_rows} {m.n_cols} {int(keep.sum())}\n")
    for k in np.flatnonzero(keep):
        if m.values is None:
            buf.write(f"{rows[k] + 1} {cols[k] + 1}\n")
        else:
            buf.write(f"{rows[k] + 1} {cols[k] + 1} {float(m.values[k])!r}\n")
    return buf.getvalue()


def save_matrix_market(m: SparseMatrix, path: str) -> None:
    if m.symmetric:
        t = transpose_pattern(m)
        if not (np.array_equal(t.row_ptr, m.row_ptr) and np.array_equal(t.col_idx, m.col_idx)):
            raise MatrixError("matrix flagged symmetric has an unsymmetric pattern")
    atomic_write(path, format_matrix_market(m))


def transpose_pattern(m: SparseMatrix) -> SparseMatrix:
    return from_coo(m.n_cols, m.n_rows, m.col_idx, m.rows())


# -- generators ------------------------------------------------------------------

def _symmetric_offsets(nzr: int, reach: int, rng: np.random.Generator) -> np.ndarray:
    """Non-negative offsets whose +/- mirror gives ``nzr`` entries per interior row.

    The farthest offset ``reach`` is always used so the nominal bandwidth is
    attained; the rest are drawn without replacement from [1, reach).
    """
    half = (nzr - 1) // 2 if nzr % 2 else nzr // 2
    diagonal = nzr % 2 == 1
    if nzr < 1 or half > reach or (half > 0 and reach < 1):
        raise InfeasibleDensity(f"{nzr} nonzeros per row do not fit within distance {reach}")
    if half == 0:
        return np.array([0], np.int64)
    rest = rng.choice(np.arange(1, reach), size=half - 1, replace=False) if half > 1 else []
    offs = np.sort(np.concatenate([np.asarray(rest, np.int64), [reach]]))
    return np.concatenate([[0], offs]) if diagonal else offs


def _from_offsets(n: int, offsets: np.ndarray, rng: np.random.Generator) -> SparseMatrix:
    # lower triangle (including the diagonal), then its mirror
    lo_r = np.concatenate([np.arange(k, n) for k in offsets])
    lo_c = np.concatenate([np.arange(0, n - k) for k in offsets])
    vals = rng.standard_normal(len(lo_r))
    off = lo_r != lo_c
    return from_coo(n, n, np.concatenate([lo_r, lo_c[off]]), np.concatenate([lo_c, lo_r[off]]),
                    np.concatenate([vals, vals[off]]), symmetric=True)


def gen_banded(n: int, half_bandwidth: int, nzr: int, seed: int = 0) -> SparseMatrix:
    """Symmetric matrix with ``nzr`` entries per interior row, all within the band."""
    if nzr > 2 * half_bandwidth + 1:
        raise InfeasibleDensity(f"nzr={nzr} exceeds band capacity {2 * half_bandwidth + 1}")
    if half_bandwidth >= n:
        raise InfeasibleDensity("half bandwidth must be < n")
    rng = np.random.default_rng(seed)
    return _from_offsets(n, _symmetric_offsets(nzr, half_bandwidth, rng), rng)


def gen_scattered(n: int, nzr: int, spread: int, seed: int = 0) -> SparseMatrix:
    """Symmetric matrix with ``nzr`` entries in every row, at offsets drawn up to ``spread``.

    Offsets wrap around the matrix edge, so every row keeps its full count and
    wrapped entries sit far from the diagonal.
    """
    if not 1 <= spread <= n:
        raise InfeasibleDensity(f"spread must lie in [1, {n}]")
    reach = min(spread - 1, (n - 1) // 2)
    rng = np.random.default_rng(seed)
    offs = _symmetric_offsets(nzr, reach, rng) if nzr > 1 else np.array([0], np.int64)
    i = np.arange(n)
    rows = [i if k == 0 else np.concatenate([i, i]) for k in offs]
    cols = [i if k == 0 else np.concatenate([(i + k) % n, (i - k) % n]) for k in offs]
    r, c = np.concatenate(rows), np.concatenate(cols)
    # one value per unordered pair keeps the matrix numerically symmetric
    key = np.minimum(r, c) * n + np.maximum(r, c)
    uniq, inv = np.unique(key, return_inverse=True)
    vals = rng.standard_normal(len(uniq))[inv]
    return from_coo(n, n, r, c, vals, symmetric=True)


# -- partitioning ----------------------------------------------------------------

Partition = Tuple[int, ...]  # row boundaries, length n_ranks + 1


def _greedy_split(weights: np.ndarray, n_parts: int, cap: int) -> Optional[List[int]]:
    """Left-to-right packing under ``cap``; every part keeps at least one row."""
    n = len(weights)
    prefix = np.concatenate([[0], np.cumsum(weights)])
    bounds = [0]
    start = 0
    for part in range(n_parts - 1):
        # furthest end with load <= cap, leaving one row for each later part
        end = int(np.searchsorted(prefix, prefix[start] + cap, side="right")) - 1
        end = min(end, n - (n_parts - 1 - part))
        if end <= start:
            return None
        bounds.append(end)
        start = end
    if prefix[n] - prefix[start] > cap:
        return None
    bounds.append(n)
    return bounds


def partition_rows(m: SparseMatrix, n_ranks: int) -> Partition:
    """Contiguous row blocks minimizing the largest per-rank nonzero count.

    Bisection on the bottleneck value with a greedy feasibility check; the
    greedy split at the optimal bottleneck is returned.
    """
    return partition_weights(m.row_nnz(), n_ranks)


def partition_weights(weights: Sequence[int], n_ranks: int) -> Partition:
    w = np.asarray(weights, dtype=np.int64)
    if n_ranks < 1:
        raise TooManyRanks("n_ranks must be >= 1")
    if n_ranks > len(w):
        raise TooManyRanks(f"{n_ranks} ranks for {len(w)} rows")
    lo, hi = int(w.max(initial=0)), int(w.sum())
    while lo < hi:
        mid = (lo + hi) // 2
        if _greedy_split(w, n_ranks, mid) is None:
            lo = mid + 1
        else:
            hi = mid
    return tuple(_greedy_split(w, n_ranks, lo))


def partition_loads(weights: Sequence[int], part: Partition) -> List[int]:
    c = np.concatenate([[0], np.cumsum(np.asarray(weights, dtype=np.int64))])
    return [int(c[b] - c[a]) for a, b in zip(part, part[1:])]


def owner_of(part: Partition, index) -> np.ndarray:
    return np.searchsorted(np.asarray(part), index, side="right") - 1


# -- communication matrix --------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CommMatrix:
    """``volume[i, j]``: bytes rank ``j`` sends to rank ``i`` per product."""

    volume: np.ndarray
    element_bytes: int = 8
    partition: Optional[Partition] = None

    def __post_init__(self):
        v = np.asarray(self.volume, dtype=np.int64)
        object.__setattr__(self, "volume", v)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise InconsistentCommMatrix("communication matrix must be square")
        if np.any(np.diag(v) != 0):
            raise InconsistentCommMatrix("self-communication volume must be 0")
        if np.any(v < 0):
            raise InconsistentCommMatrix("negative volume")
        if self.element_bytes < 1 or np.any(v % self.element_bytes):
            raise InconsistentCommMatrix(f"volumes must be multiples of {self.element_bytes} B")
        if self.partition is not None and len(self.partition) != v.shape[0] + 1:
            raise InconsistentCommMatrix("partition length must be n_ranks + 1")

    @property
    def n_ranks(self) -> int:
        return self.volume.shape[0]

    def recv_from(self, i: int) -> List[Tuple[int, int]]:
        return [(int(j), int(self.volume[i, j])) for j in np.flatnonzero(self.volume[i])]

    def send_to(self, j: int) -> List[Tuple[int, int]]:
        return [(int(i), int(self.volume[i, j])) for i in np.flatnonzero(self.volume[:, j])]

    def total_volume(self) -> int:
        return int(self.volume.sum())

    def mean_message_bytes(self) -> float:
        nz = self.volume[self.volume > 0]
        return float(nz.mean()) if len(nz) else 0.0

    def distances(self) -> List[int]:
        i, j = np.nonzero(self.volume)
        return sorted(set((j - i).tolist()))

    def __eq__(self, other) -> bool:
        if not isinstance(other, CommMatrix):
            return NotImplemented
        return (self.element_bytes == other.element_bytes and self.partition == other.partition
                and np.array_equal(self.volume, other.volume))


def build_comm_matrix(m: SparseMatrix, part: Partition, element_bytes: int = 8) -> CommMatrix:
    """Distinct remote RHS columns each rank needs, grouped by their owner."""
    if m.n_rows != m.n_cols:
        raise DimensionMismatch("halo volumes need a square matrix")
    if part[0] != 0 or part[-1] != m.n_rows or any(b <= a for a, b in zip(part, part[1:])):
        raise MatrixError("partition must be strictly increasing from 0 to n_rows")
    n = len(part) - 1
    vol = np.zeros((n, n), dtype=np.int64)
    for i in range(n):
        cols = np.unique(m.col_idx[m.row_ptr[part[i]]:m.row_ptr[part[i + 1]]])
        counts = np.bincount(owner_of(part, cols), minlength=n)
        counts[i] = 0
        vol[i] = counts * element_bytes
    return CommMatrix(vol, element_bytes, tuple(int(p) for p in part))


@dataclass(frozen=True)
class RankLoad:
    """Per-rank work split of a row-partitioned product."""

    rows: Tuple[int, ...]
    nnz_local: Tuple[int, ...]
    nnz_remote: Tuple[int, ...]

    @property
    def nnz(self) -> Tuple[int, ...]:
        return tuple(a + b for a, b in zip(self.nnz_local, self.nnz_remote))


def rank_loads(m: SparseMatrix, part: Partition) -> RankLoad:
    owner_rows = owner_of(part, m.rows())
    local = owner_of(part, m.col_idx) == owner_rows
    n = len(part) - 1
    nl = np.bincount(owner_rows[local], minlength=n)
    nr = np.bincount(owner_rows[~local], minlength=n)
    rows = np.diff(np.asarray(part))
    return RankLoad(tuple(int(x) for x in rows), tuple(int(x) for x in nl),
                    tuple(int(x) for x in nr))


COMM_TAG = "%desync-comm v1"


def format_comm_matrix(c: CommMatrix) -> str:
    """Header lines, then one ``src dst bytes`` triplet per nonzero volume."""
    out = [COMM_TAG, f"n_ranks {c.n_ranks}", f"element_bytes {c.element_bytes}"]
    if c.partition is not None:
        out.append("partition " + " ".join(str(p) for p in c.partition))
    for i, j in zip(*np.nonzero(c.volume)):
        out.append(f"{j} {i} {c.volume[i, j]}")
    return "\n".join(out) + "\n"


def parse_comm_matrix(text: str) -> CommMatrix:
    lines = text.splitlines()
    if not lines or lines[0].strip() != COMM_TAG:
        raise ParseError(f"expected {COMM_TAG!r} header", 1)
    head = {}
    lineno = 1
    body = []
    for lineno, line in enumerate(lines[1:], start=2):
        f = line.split()
        if not f or f[0].startswith("#"):
            continue
        if f[0] in ("n_ranks", "element_bytes", "partition"):
            if body:
                raise ParseError(f"header key {f[0]!r} after triplets", lineno)
            head[f[0]] = f[1:]
            continue
        if len(f) != 3:
            raise ParseError("expected 'src dst bytes'", lineno)
        try:
            body.append((lineno, int(f[0]), int(f[1]), int(f[2])))
        except ValueError:
            raise ParseError(f"malformed triplet {line!r}", lineno) from None
    if "n_ranks" not in head or "element_bytes" not in head:
        raise ParseError("missing n_ranks or element_bytes", lineno)
    n = int(head["n_ranks"][0])
    vol = np.zeros((n, n), dtype=np.int64)
    for ln, src, dst, nbytes in body:
        if not (0 <= src < n and 0 <= dst < n):
            raise DimensionMismatch(f"line {ln}: rank outside [0, {n})")
        vol[dst, src] += nbytes
    part = tuple(int(p) for p in head["partition"]) if "partition" in head else None
    return CommMatrix(vol, int(head["element_bytes"][0]), part)


def write_comm_matrix(c: CommMatrix, path: str) -> None:
    atomic_write(path, format_comm_matrix(c))


def read_comm_matrix(path: str) -> CommMatrix:
    with open(path) as fh:
        return parse_comm_matrix(fh.read())
