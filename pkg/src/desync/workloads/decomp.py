"""Halo profiles of a 3D stencil matrix under a node-grid domain decomposition.

Nodes tile the global grid as ``m_x * m_y * m_z`` boxes of the per-node grid
(node id ``ix + m_x * (iy + m_y * iz)``). Inside a node the box is cut into
``ranks_per_node`` slabs along x, balanced to within one layer; rank id is
``node * ranks_per_node + slab``. A star stencil of radius ``radius`` (13
points for radius 2) couples each site to sites up to that distance along
each axis, so a face halo is ``radius`` layers deep.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Dict, List, Tuple

import numpy as np
import yaml

from ..matrixio import CommMatrix

AXES = ("x", "y", "z")


class IndivisibleGrid(ValueError):
    pass


@dataclass(frozen=True)
class DecompSpec:
    node_grid: Tuple[int, int, int]
    per_node_grid: Tuple[int, int, int] = (128, 128, 64)
    ranks_per_node: int = 20
    periodic_dims: Tuple[str, ...] = ("x", "y")
    radius: int = 2
    dof: int = 4
    value_bytes: int = 16

    def __post_init__(self):
        object.__setattr__(self, "node_grid", tuple(int(v) for v in self.node_grid))
        object.__setattr__(self, "per_node_grid", tuple(int(v) for v in self.per_node_grid))
        object.__setattr__(self, "periodic_dims", tuple(self.periodic_dims))
        if len(self.node_grid) != 3 or len(self.per_node_grid) != 3:
            raise IndivisibleGrid("grids must be three-dimensional")
        if min(self.node_grid) < 1 or min(self.per_node_grid) < 1 or self.ranks_per_node < 1:
            raise IndivisibleGrid("grid extents and ranks_per_node must be positive")
        bad = set(self.periodic_dims) - set(AXES)
        if bad:
            raise ValueError(f"unknown periodic dims {sorted(bad)}")
        if self.per_node_grid[0] < self.ranks_per_node * self.radius:
            # thinner slabs would pull halo layers from ranks beyond the neighbour
            raise IndivisibleGrid(
                f"x extent {self.per_node_grid[0]} cannot give {self.ranks_per_node} slabs "
                f"of at least {self.radius} layers")

    @property
    def n_nodes(self) -> int:
        return math.prod(self.node_grid)

    @property
    def n_ranks(self) -> int:
        return self.n_nodes * self.ranks_per_node


@dataclass(frozen=True)
class CommProfile:
    """Per rank: ``(offset, bytes)`` for every partner it receives halo data from."""

    n_ranks: int
    partners: Tuple[Tuple[Tuple[int, int], ...], ...]

    def distances(self) -> List[int]:
        return sorted({o for row in self.partners for o, _ in row})

    def sizes(self) -> Dict[int, Tuple[int, ...]]:
        """Distinct message sizes seen at each offset."""
        out: Dict[int, set] = {}
        for row in self.partners:
            for o, b in row:
                out.setdefault(o, set()).add(b)
        return {o: tuple(sorted(v)) for o, v in sorted(out.items())}

    def max_distance(self) -> int:
        return max((abs(o) for o in self.distances()), default=0)

    def to_comm_matrix(self, element_bytes: int = 8) -> CommMatrix:
        n = self.n_ranks
        vol = np.zeros((n, n), dtype=np.int64)
        for r, row in enumerate(self.partners):
            for o, b in row:
                vol[r, (r + o) % n] += b
        return CommMatrix(vol, element_bytes)


def _ring_offset(peer: int, rank: int, n: int) -> int:
    d = (peer - rank) % n
    return d - n if d > n // 2 else d


def _slabs(extent: int, parts: int) -> np.ndarray:
    """Start index of each balanced slab, plus the end."""
    sizes = np.full(parts, extent // parts)
    sizes[: extent % parts] += 1
    return np.concatenate([[0], np.cumsum(sizes)])


def decompose(spec: DecompSpec) -> CommProfile:
    mx, my, mz = spec.node_grid
    nx, ny, nz = spec.per_node_grid
    rpn = spec.ranks_per_node
    glob = (mx * nx, my * ny, mz * nz)
    cuts = _slabs(nx, rpn)
    site_bytes = spec.dof * spec.value_bytes
    n = spec.n_ranks

    def owner(x: int, y: int, z: int) -> int:
        ix, lx = divmod(x, nx)
        node = ix + mx * (y // ny + my * (z // nz))
        return node * rpn + int(np.searchsorted(cuts, lx, side="right") - 1)

    rows = []
    for r in range(n):
        node, slab = divmod(r, rpn)
        ix, rest = node % mx, node // mx
        iy, iz = rest % my, rest // my
        lo = [ix * nx + int(cuts[slab]), iy * ny, iz * nz]
        hi = [ix * nx + int(cuts[slab + 1]), (iy + 1) * ny, (iz + 1) * nz]
        extent = [h - l for l, h in zip(lo, hi)]
        acc: Dict[int, int] = {}
        for axis in range(3):
            periodic = AXES[axis] in spec.periodic_dims
            face = math.prod(extent[a] for a in range(3) if a != axis) * site_bytes
            for sign in (1, -1):
                for k in range(1, spec.radius + 1):
                    c = hi[axis] - 1 + k if sign > 0 else lo[axis] - k
                    if not 0 <= c < glob[axis]:
                        if not periodic:
                            continue
                        c %= glob[axis]
                    pos = list(lo)
                    pos[axis] = c
                    p = owner(*pos)
                    if p != r:
                        acc[p] = acc.get(p, 0) + face
        rows.append(tuple(sorted(((_ring_offset(p, r, n), b) for p, b in acc.items()),
                                 key=lambda ob: (abs(ob[0]), -ob[0]))))
    return CommProfile(n, tuple(rows))


# -- literal presets ------------------------------------------------------------

@dataclass(frozen=True)
class Preset:
    name: str
    node_grid: Tuple[int, int, int]
    partners: Tuple[Tuple[int, float], ...]  # (offset, kB)
    ranks_per_node: int

    def distances(self) -> List[int]:
        return sorted({o for o, _ in self.partners})

    def message_kb(self) -> Dict[int, float]:
        return dict(self.partners)


def _grid_value(token: str, n_nodes: int) -> int:
    if token == "n":
        return n_nodes
    if token == "sqrt":
        root = math.isqrt(n_nodes)
        if root * root != n_nodes:
            raise IndivisibleGrid(f"{n_nodes} nodes is not a perfect square")
        return root
    return int(token)


@lru_cache(maxsize=1)
def _preset_table() -> dict:
    text = resources.files("desync.workloads").joinpath("data/topi_presets.yaml").read_text()
    return yaml.safe_load(text)


def preset_names() -> List[str]:
    return sorted(_preset_table()["presets"])


def preset(name: str) -> Preset:
    table = _preset_table()
    try:
        row = table["presets"][name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; known: {preset_names()}") from None
    n_nodes = table["n_nodes"]
    grid = tuple(_grid_value(t, n_nodes) for t in row["node_grid"])
    return Preset(name, grid, tuple((int(o), float(kb)) for o, kb in row["partners"]),
                  table["ranks_per_node"])


def preset_profile(name: str, n_ranks: int = None, periodic: bool = False) -> CommProfile:
    """Apply a preset's partner list to every rank; offsets leaving the range are dropped
    unless ``periodic``."""
    p = preset(name)
    n = n_ranks or math.prod(p.node_grid) * p.ranks_per_node
    rows = []
    for r in range(n):
        row = []
        for o, kb in p.partners:
            if periodic or 0 <= r + o < n:
                row.append((o, int(round(kb * 1000))))
        rows.append(tuple(row))
    return CommProfile(n, tuple(rows))


def preset_comm_matrix(name: str, n_ranks: int = None, periodic: bool = False) -> CommMatrix:
    """Preset message sizes are whole multiples of 8 B, so 8-byte elements are used."""
    return preset_profile(name, n_ranks, periodic).to_comm_matrix(element_bytes=8)
