"""Labeled octrees over an axis-aligned 3-D box.

A node is either a leaf value (``int``) or a tuple of eight children.  Leaf
value 0 is EMPTY; a binary tree stores FULL as 1 while a labeled tree
(backing a :class:`RegionSet`) stores ``label + 1``.  Child index ``c`` holds
the half-space bits ``x = c & 1``, ``y = (c >> 1) & 1``, ``z = (c >> 2) & 1``,
so preorder traversal visits leaves in locational-code order.

Trees are kept canonical: no internal node has eight equal leaf children.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components as _graph_components

EMPTY, FULL, MIXED = 0, 1, 2
MAX_DEPTH = 12
DENSE_MAX_DEPTH = 9

MAGIC = b"OCT1"
REGION_MAGIC = b"RGN1"
_HEADER = struct.Struct("<6dB3B")

PROVENANCES = ("aspect", "basic_region", "uniqueness_domain",
               "singular_surface", "characteristic_surface",
               "component", "multiplicity")


class OctreeError(ValueError):
    pass


@dataclass(frozen=True)
class Box3:
    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != 3 or len(hi) != 3:
            raise OctreeError("Box3 needs 3-D corners")
        if not all(a < b for a, b in zip(lo, hi)):
            raise OctreeError(f"degenerate box {lo} .. {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def size(self) -> np.ndarray:
        return np.subtract(self.hi, self.lo)

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    def cell_size(self, level: int) -> np.ndarray:
        return self.size / (1 << level)


class CellId(NamedTuple):
    depth: int
    path: tuple

    @classmethod
    def from_coords(cls, level: int, i: int, j: int, k: int) -> "CellId":
        path = []
        for b in range(level - 1, -1, -1):
            path.append(((i >> b) & 1) | (((j >> b) & 1) << 1)
                        | (((k >> b) & 1) << 2))
        return cls(level, tuple(path))

    @property
    def coords(self) -> tuple:
        i = j = k = 0
        for c in self.path:
            i = (i << 1) | (c & 1)
            j = (j << 1) | ((c >> 1) & 1)
            k = (k << 1) | ((c >> 2) & 1)
        return i, j, k


@dataclass(frozen=True)
class LeafTable:
    """Leaves in preorder; coordinates are integer indices at the leaf level."""
    level: np.ndarray
    ix: np.ndarray
    iy: np.ndarray
    iz: np.ndarray
    value: np.ndarray

    def __len__(self):
        return len(self.level)

    def cell_ids(self, index=None) -> list:
        idx = range(len(self)) if index is None else index
        return [CellId.from_coords(int(self.level[n]), int(self.ix[n]),
                                   int(self.iy[n]), int(self.iz[n]))
                for n in idx]

    def volumes(self, bounds: Box3) -> np.ndarray:
        return bounds.volume / 8.0 ** self.level.astype(float)

    def centers(self, bounds: Box3) -> np.ndarray:
        size = bounds.size / (1 << self.level.astype(np.int64))[:, None]
        ijk = np.column_stack([self.ix, self.iy, self.iz]) + 0.5
        return np.asarray(bounds.lo) + ijk * size


def _merge(children):
    first = children[0]
    if isinstance(first, int) and all(c == first for c in children):
        return first
    return tuple(children)


def _morton(level, ix, iy, iz, max_depth):
    shift = (max_depth - level).astype(np.int64)
    x = ix.astype(np.int64) << shift
    y = iy.astype(np.int64) << shift
    z = iz.astype(np.int64) << shift
    key = np.zeros(len(level), np.int64)
    for b in range(max_depth):
        key |= ((x >> b) & 1) << (3 * b)
        key |= ((y >> b) & 1) << (3 * b + 1)
        key |= ((z >> b) & 1) << (3 * b + 2)
    return key


def _check_depth(max_depth):
    if not isinstance(max_depth, (int, np.integer)) or not 1 <= max_depth <= MAX_DEPTH:
        raise OctreeError(f"max_depth must be an integer in [1, {MAX_DEPTH}]")


class Octree:
    """Immutable canonical octree."""

    __slots__ = ("bounds", "max_depth", "periodic", "root", "_leaves", "_dense")

    def __init__(self, bounds: Box3, max_depth: int, root, periodic=(False, False, False)):
        _check_depth(max_depth)
        self.bounds = bounds
        self.max_depth = int(max_depth)
        self.periodic = tuple(bool(p) for p in periodic)
        self.root = root
        self._leaves = None
        self._dense = None

    # -- construction -------------------------------------------------------

    @classmethod
    def constant(cls, bounds, max_depth, value=FULL, periodic=(False,) * 3):
        return cls(bounds, max_depth, int(value), periodic)

    @classmethod
    def from_leaves(cls, bounds, max_depth, level, ix, iy, iz, value,
                    periodic=(False,) * 3) -> "Octree":
        """Assemble a tree from leaves that partition the box (any order)."""
        _check_depth(max_depth)
        level = np.asarray(level, np.int64)
        if len(level) == 0:
            raise OctreeError("a partition needs at least one leaf")
        order = np.argsort(_morton(level, np.asarray(ix), np.asarray(iy),
                                   np.asarray(iz), max_depth), kind="stable")
        levels = level[order].tolist()
        values = np.asarray(value, np.int64)[order].tolist()
        pos = 0

        def node(lv):
            nonlocal pos
            if pos >= len(levels):
                raise OctreeError("leaves do not partition the box")
            if levels[pos] == lv:
                v = values[pos]
                pos += 1
                return v
            if levels[pos] < lv or lv >= max_depth:
                raise OctreeError("leaves do not partition the box")
            return _merge([node(lv + 1) for _ in range(8)])

        root = node(0)
        if pos != len(levels):
            raise OctreeError("leaves do not partition the box")
        return cls(bounds, max_depth, root, periodic)

    @classmethod
    def from_dense(cls, bounds, grid, periodic=(False,) * 3) -> "Octree":
        grid = np.asarray(grid)
        n = grid.shape[0]
        depth = n.bit_length() - 1
        if grid.shape != (n, n, n) or (1 << depth) != n:
            raise OctreeError("dense grid must be a cube of side 2**depth")
        vals = [grid.astype(np.int64)]
        uni = [np.ones(grid.shape, bool)]
        for _ in range(depth):
            v, u = vals[-1], uni[-1]
            m = v.shape[0] // 2
            bv = v.reshape(m, 2, m, 2, m, 2)
            bu = u.reshape(m, 2, m, 2, m, 2).all(axis=(1, 3, 5))
            first = bv[:, 0, :, 0, :, 0]
            same = (bv == first[:, None, :, None, :, None]).all(axis=(1, 3, 5))
            vals.append(first)
            uni.append(bu & same)
        vals.reverse()
        uni.reverse()

        def node(lv, i, j, k):
            if uni[lv][i, j, k]:
                return int(vals[lv][i, j, k])
            return tuple(node(lv + 1, 2 * i + (c & 1), 2 * j + ((c >> 1) & 1),
                              2 * k + (c >> 2)) for c in range(8))

        return cls(bounds, max(depth, 1), node(0, 0, 0, 0), periodic)

    # -- traversal ----------------------------------------------------------

    def leaves(self) -> LeafTable:
        if self._leaves is None:
            lv, xs, ys, zs, vs = [], [], [], [], []
            stack = [(self.root, 0, 0, 0, 0)]
            while stack:
                nd, d, i, j, k = stack.pop()
                if isinstance(nd, int):
                    lv.append(d)
                    xs.append(i)
                    ys.append(j)
                    zs.append(k)
                    vs.append(nd)
                    continue
                for c in range(7, -1, -1):
                    stack.append((nd[c], d + 1, 2 * i + (c & 1),
                                  2 * j + ((c >> 1) & 1), 2 * k + (c >> 2)))
            self._leaves = LeafTable(*(np.array(a, np.int64) for a in (lv, xs, ys, zs, vs)))
        return self._leaves

    def full_leaves(self) -> LeafTable:
        t = self.leaves()
        m = t.value != EMPTY
        return LeafTable(t.level[m], t.ix[m], t.iy[m], t.iz[m], t.value[m])

    def node_count(self) -> int:
        count = 0
        stack = [self.root]
        while stack:
            nd = stack.pop()
            count += 1
            if not isinstance(nd, int):
                stack.extend(nd)
        return count

    def volume(self) -> float:
        t = self.leaves()
        return float(np.sum(t.volumes(self.bounds)[t.value != EMPTY]))

    def is_empty(self) -> bool:
        return self.root == EMPTY

    def binary(self) -> "Octree":
        """Same set with every non-empty value mapped to FULL."""
        def conv(nd):
            if isinstance(nd, int):
                return FULL if nd else EMPTY
            return _merge([conv(c) for c in nd])
        return Octree(self.bounds, self.max_depth, conv(self.root), self.periodic)

    def __eq__(self, other):
        return (isinstance(other, Octree) and self.bounds == other.bounds
                and self.max_depth == other.max_depth
                and self.periodic == other.periodic and self.root == other.root)

    def __hash__(self):
        return hash((self.bounds, self.max_depth, self.periodic))

    def __repr__(self):
        return (f"Octree(depth={self.max_depth}, leaves={len(self.leaves())}, "
                f"volume={self.volume():.4g})")

    # -- dense views --------------------------------------------------------

    def to_dense(self, values=None, dtype=None) -> np.ndarray:
        """Voxel grid at max_depth holding leaf values (or ``values[leaf]``)."""
        t = self.leaves()
        vals = t.value if values is None else np.asarray(values)
        return rasterize(t, self.max_depth, vals, dtype or vals.dtype)

    def leaf_index_grid(self) -> np.ndarray:
        """Voxel grid of preorder leaf indices."""
        t = self.leaves()
        return rasterize(t, self.max_depth, np.arange(len(t), dtype=np.int32), np.int32)

    def voxel_index(self, points) -> tuple:
        """Integer voxel coordinates of points and a validity mask."""
        return voxel_index(self.bounds, self.max_depth, self.periodic, points)

    def value_at(self, points) -> np.ndarray:
        """Leaf value containing each point (0 outside the box)."""
        pts = np.atleast_2d(np.asarray(points, float))
        ijk, ok = self.voxel_index(pts)
        out = np.zeros(len(pts), np.int64)
        if self.max_depth <= 8:
            if self._dense is None:
                self._dense = self.to_dense(dtype=np.int64)
            out[ok] = self._dense[ijk[ok, 0], ijk[ok, 1], ijk[ok, 2]]
            return out
        for n in np.flatnonzero(ok):
            nd = self.root
            i, j, k = ijk[n]
            b = self.max_depth - 1
            while not isinstance(nd, int):
                nd = nd[((i >> b) & 1) | (((j >> b) & 1) << 1) | (((k >> b) & 1) << 2)]
                b -= 1
            out[n] = nd
        return out

    def contains(self, points) -> np.ndarray:
        return self.value_at(points) != EMPTY


def voxel_index(bounds: Box3, max_depth: int, periodic, points):
    pts = np.atleast_2d(np.asarray(points, float))
    n = 1 << max_depth
    lo = np.asarray(bounds.lo)
    size = bounds.size
    u = (pts - lo) / size
    ok = np.all(np.isfinite(u), axis=1)
    for a in range(3):
        if periodic[a]:
            u[:, a] = np.mod(u[:, a], 1.0)
        else:
            ok &= (u[:, a] >= 0.0) & (u[:, a] <= 1.0)
    ijk = np.clip(np.floor(np.nan_to_num(u) * n).astype(np.int64), 0, n - 1)
    return ijk, ok


def rasterize(table: LeafTable, max_depth: int, values, dtype) -> np.ndarray:
    if max_depth > DENSE_MAX_DEPTH:
        raise OctreeError(f"dense views are limited to depth {DENSE_MAX_DEPTH}")
    n = 1 << max_depth
    grid = np.zeros((n, n, n), dtype)
    values = np.asarray(values)
    for lv in np.unique(table.level):
        sel = np.flatnonzero(table.level == lv)
        s = 1 << (max_depth - int(lv))
        x0, y0, z0 = table.ix[sel] * s, table.iy[sel] * s, table.iz[sel] * s
        v = values[sel]
        if s == 1:
            grid[x0, y0, z0] = v
            continue
        # chunk so the fancy index never exceeds ~8M entries
        o = np.arange(s)
        step = max(1, (1 << 23) // (s ** 3))
        for a in range(0, len(sel), step):
            b = slice(a, a + step)
            grid[x0[b, None, None, None] + o[None, :, None, None],
                 y0[b, None, None, None] + o[None, None, :, None],
                 z0[b, None, None, None] + o[None, None, None, :]] = v[b, None, None, None]
    return grid


# ---------------------------------------------------------------- build --

def build(bounds: Box3, max_depth: int, classify, periodic=(False,) * 3,
          min_depth: int = 0) -> Octree:
    """Adaptive build from a cell classifier.

    ``classify(level, lo, hi)`` receives the level and arrays of cell corners
    (n, 3) and returns n states among EMPTY, FULL, MIXED.  MIXED cells are
    split until ``max_depth`` where they close to FULL.  Cells shallower than
    ``min_depth`` are always split.
    """
    _check_depth(max_depth)
    lo0 = np.asarray(bounds.lo)
    leaves = []
    coords = np.zeros((1, 3), np.int64)
    for lv in range(max_depth + 1):
        if lv < min_depth and lv < max_depth:
            coords = _children(coords)
            continue
        size = bounds.cell_size(lv)
        lo = lo0 + coords * size
        states = np.asarray(classify(lv, lo, lo + size), np.int64)
        if states.shape != (len(coords),):
            raise OctreeError("classify must return one state per cell")
        if lv == max_depth:
            leaves.append((lv, coords, np.where(states == EMPTY, EMPTY, FULL)))
            break
        done = states != MIXED
        leaves.append((lv, coords[done], states[done]))
        coords = _children(coords[~done])
        if len(coords) == 0:
            break
    return _from_parts(bounds, max_depth, leaves, periodic)


def _children(coords):
    c = np.arange(8)
    off = np.column_stack([c & 1, (c >> 1) & 1, c >> 2])
    return (2 * coords[:, None, :] + off[None, :, :]).reshape(-1, 3)


def _from_parts(bounds, max_depth, parts, periodic):
    level = np.concatenate([np.full(len(c), lv, np.int64) for lv, c, _ in parts])
    coords = np.concatenate([c for _, c, _ in parts])
    values = np.concatenate([v for _, _, v in parts])
    return Octree.from_leaves(bounds, max_depth, level, coords[:, 0], coords[:, 1],
                              coords[:, 2], values, periodic)


# ------------------------------------------------------- set algebra --

def _check_compatible(a: Octree, b: Octree):
    if a.bounds != b.bounds or a.max_depth != b.max_depth:
        raise OctreeError("boolean operations need identical bounds and max_depth")


def _union(a, b):
    if isinstance(a, int):
        return b if a == EMPTY else FULL
    if isinstance(b, int):
        return a if b == EMPTY else FULL
    return _merge([_union(x, y) for x, y in zip(a, b)])


def _intersect(a, b):
    if isinstance(a, int):
        return EMPTY if a == EMPTY else b
    if isinstance(b, int):
        return EMPTY if b == EMPTY else a
    return _merge([_intersect(x, y) for x, y in zip(a, b)])


def _complement(a):
    if isinstance(a, int):
        return FULL if a == EMPTY else EMPTY
    return tuple(_complement(x) for x in a)


def _difference(a, b):
    if isinstance(b, int):
        return EMPTY if b != EMPTY else a
    if isinstance(a, int):
        return EMPTY if a == EMPTY else _complement(b)
    return _merge([_difference(x, y) for x, y in zip(a, b)])


def union(a: Octree, b: Octree) -> Octree:
    _check_compatible(a, b)
    return Octree(a.bounds, a.max_depth, _union(a.binary().root, b.binary().root), a.periodic)


def intersect(a: Octree, b: Octree) -> Octree:
    _check_compatible(a, b)
    return Octree(a.bounds, a.max_depth, _intersect(a.binary().root, b.binary().root), a.periodic)


def difference(a: Octree, b: Octree) -> Octree:
    _check_compatible(a, b)
    return Octree(a.bounds, a.max_depth, _difference(a.binary().root, b.binary().root), a.periodic)


def union_all(trees) -> Octree:
    trees = list(trees)
    out = trees[0].binary()
    for t in trees[1:]:
        out = union(out, t)
    return out


# ------------------------------------------------------ connectivity --

def label_voxels(mask: np.ndarray, periodic) -> tuple:
    """6-connected labels of a boolean voxel grid, wrapping periodic axes.

    Returns ``(labels, count)``; labels are 1-based, 0 is background.
    """
    labels, count = ndimage.label(mask)
    if count == 0 or not any(periodic):
        return labels, count
    rows, cols = [], []
    for axis, per in enumerate(periodic):
        if not per:
            continue
        a = np.take(labels, 0, axis=axis)
        b = np.take(labels, -1, axis=axis)
        both = (a > 0) & (b > 0)
        rows.append(a[both])
        cols.append(b[both])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(count + 1, count + 1))
    ncomp, comp = _graph_components(graph, directed=False)
    # renumber so background stays 0
    comp = comp - comp[0]
    comp[comp < 0] += ncomp
    _, dense = np.unique(comp, return_inverse=True)
    return dense[labels].reshape(labels.shape), len(np.unique(comp)) - 1


def leaf_components(table: LeafTable, leaf_index: np.ndarray, leaf_mask: np.ndarray,
                    max_depth: int, periodic) -> tuple:
    """Component label per leaf (-1 where ``leaf_mask`` is false).

    ``leaf_index`` is the voxel grid of leaf indices for ``table``.  Labels are
    numbered in order of the first member leaf in preorder.
    """
    vox = leaf_mask[leaf_index]
    labels, count = label_voxels(vox, periodic)
    s = (1 << (max_depth - table.level))
    leaf_lab = labels[table.ix * s, table.iy * s, table.iz * s].astype(np.int64) - 1
    leaf_lab[~leaf_mask] = -1
    if count == 0:
        return leaf_lab, 0
    members = np.flatnonzero(leaf_lab >= 0)
    first = np.full(count, np.iinfo(np.int64).max)
    np.minimum.at(first, leaf_lab[members], members)
    present = first < np.iinfo(np.int64).max
    order = np.argsort(first[present])
    remap = np.full(count, -1)
    remap[np.flatnonzero(present)[order]] = np.arange(order.size)
    leaf_lab[members] = remap[leaf_lab[members]]
    return leaf_lab, int(order.size)


def connected_components(t: Octree, provenance: str = "component") -> "RegionSet":
    table = t.leaves()
    mask = table.value != EMPTY
    labels, count = leaf_components(table, t.leaf_index_grid(), mask,
                                    t.max_depth, t.periodic)
    values = np.where(mask, labels + 1, EMPTY)
    tree = Octree.from_leaves(t.bounds, t.max_depth, table.level, table.ix, table.iy,
                              table.iz, values, t.periodic)
    return RegionSet(tree, count, provenance)


def voxel_boundary(vox: np.ndarray, periodic) -> np.ndarray:
    """FULL voxels with an EMPTY face neighbor or a non-periodic box face."""
    out = np.zeros(vox.shape, bool)
    for axis in range(3):
        for shift in (1, -1):
            nb = np.roll(vox, shift, axis=axis)
            if not periodic[axis]:
                edge = [slice(None)] * 3
                edge[axis] = 0 if shift == 1 else -1
                nb[tuple(edge)] = False
            out |= vox & ~nb
    return out


def boundary_leaf_mask(t: Octree, leaf_mask=None) -> np.ndarray:
    table = t.leaves()
    if leaf_mask is None:
        leaf_mask = table.value != EMPTY
    idx = t.leaf_index_grid()
    flagged = voxel_boundary(leaf_mask[idx], t.periodic)
    hit = np.zeros(len(table), bool)
    hit[np.unique(idx[flagged])] = True
    return hit & leaf_mask


def boundary_cells(t: Octree) -> set:
    table = t.leaves()
    return set(table.cell_ids(np.flatnonzero(boundary_leaf_mask(t))))


# ------------------------------------------------------- serialization --

def _write_stream(root, buf: bytearray):
    stack = [root]
    while stack:
        nd = stack.pop()
        if isinstance(nd, int):
            buf.append(EMPTY if nd == EMPTY else FULL)
        else:
            buf.append(2)
            stack.extend(reversed(nd))


def serialize(t: Octree) -> bytes:
    buf = bytearray(MAGIC)
    buf += _HEADER.pack(*t.bounds.lo, *t.bounds.hi, t.max_depth, *map(int, t.periodic))
    _write_stream(t.root, buf)
    return bytes(buf)


def _read_header(data: bytes):
    if len(data) < 4 + _HEADER.size:
        raise OctreeError("truncated octree header")
    if data[:4] != MAGIC:
        raise OctreeError("bad octree magic")
    vals = _HEADER.unpack_from(data, 4)
    depth = vals[6]
    if not 1 <= depth <= MAX_DEPTH:
        raise OctreeError(f"depth {depth} out of range")
    if any(p not in (0, 1) for p in vals[7:]):
        raise OctreeError("periodic flags must be 0 or 1")
    return Box3(vals[0:3], vals[3:6]), depth, tuple(bool(p) for p in vals[7:])


def _read_stream(data: bytes, pos: int, max_depth: int, label_iter=None):
    n = len(data)

    def node(d):
        nonlocal pos
        if pos >= n:
            raise OctreeError("truncated node stream")
        b = data[pos]
        pos += 1
        if b == EMPTY:
            return EMPTY
        if b == FULL:
            return FULL if label_iter is None else next(label_iter) + 1
        if b != 2:
            raise OctreeError(f"bad node byte {b}")
        if d >= max_depth:
            raise OctreeError("node stream exceeds max_depth")
        return _merge([node(d + 1) for _ in range(8)])

    root = node(0)
    return root, pos


def _count_full(data: bytes, start: int, end: int) -> int:
    return data[start:end].count(FULL)


def deserialize(data: bytes) -> Octree:
    bounds, depth, periodic = _read_header(data)
    start = 4 + _HEADER.size
    root, pos = _read_stream(data, start, depth)
    if pos != len(data):
        raise OctreeError("trailing bytes after node stream")
    return Octree(bounds, depth, root, periodic)


# ---------------------------------------------------------- RegionSet --

class RegionSet:
    """Family of labeled cell sets on one octree.

    ``labeled`` stores ``label + 1`` in FULL leaves.  ``attrs`` carries
    per-region metadata (lists of length ``region_count``) and is not part of
    the binary format.
    """

    def __init__(self, labeled: Octree, region_count: int, provenance: str,
                 attrs: dict | None = None):
        if provenance not in PROVENANCES:
            raise OctreeError(f"unknown provenance {provenance!r}")
        self.labeled = labeled
        self.region_count = int(region_count)
        self.provenance = provenance
        self.attrs = dict(attrs or {})
        used = np.unique(self.labels)
        if len(used) and (used[0] < 0 or used[-1] >= self.region_count):
            raise OctreeError("labels outside [0, region_count)")
        if len(used) != self.region_count:
            raise OctreeError("region ids must be dense")

    @classmethod
    def from_leaf_labels(cls, bounds, max_depth, table: LeafTable, labels,
                         provenance, periodic=(False,) * 3, attrs=None) -> "RegionSet":
        labels = np.asarray(labels, np.int64)
        count = int(labels.max()) + 1 if np.any(labels >= 0) else 0
        values = np.where(labels >= 0, labels + 1, EMPTY)
        tree = Octree.from_leaves(bounds, max_depth, table.level, table.ix, table.iy,
                                  table.iz, values, periodic)
        return cls(tree, count, provenance, attrs)

    @property
    def tree(self) -> Octree:
        return self.labeled.binary()

    @property
    def labels(self) -> np.ndarray:
        v = self.labeled.leaves().value
        return v[v != EMPTY] - 1

    def cells(self) -> dict:
        fl = self.labeled.full_leaves()
        return dict(zip(fl.cell_ids(), (fl.value - 1).tolist()))

    def region(self, rid: int) -> Octree:
        def pick(nd):
            if isinstance(nd, int):
                return FULL if nd == rid + 1 else EMPTY
            return _merge([pick(c) for c in nd])
        t = self.labeled
        return Octree(t.bounds, t.max_depth, pick(t.root), t.periodic)

    def region_volumes(self) -> np.ndarray:
        t = self.labeled.leaves()
        vol = t.volumes(self.labeled.bounds)
        m = t.value != EMPTY
        return np.bincount(t.value[m] - 1, weights=vol[m], minlength=self.region_count)

    def label_at(self, points) -> np.ndarray:
        return self.labeled.value_at(points) - 1

    def __eq__(self, other):
        return (isinstance(other, RegionSet) and self.labeled == other.labeled
                and self.region_count == other.region_count
                and self.provenance == other.provenance)

    def __repr__(self):
        return f"RegionSet({self.provenance}, regions={self.region_count})"


def serialize_regions(rs: RegionSet) -> bytes:
    out = bytearray(serialize(rs.labeled))
    out += REGION_MAGIC
    out += struct.pack("<I", rs.region_count)
    out += rs.labels.astype("<u4").tobytes()
    return bytes(out)


def deserialize_regions(data: bytes, provenance: str = "component") -> RegionSet:
    bounds, depth, periodic = _read_header(data)
    start = 4 + _HEADER.size
    _, end = _read_stream(data, start, depth)
    rest = data[end:]
    if rest[:4] != REGION_MAGIC:
        raise OctreeError("missing RGN1 section")
    if len(rest) < 8:
        raise OctreeError("truncated region header")
    (count,) = struct.unpack_from("<I", rest, 4)
    nfull = _count_full(data, start, end)
    body = rest[8:]
    if len(body) != 4 * nfull:
        raise OctreeError("label section length does not match FULL leaves")
    labels = np.frombuffer(body, "<u4").astype(np.int64)
    root, _ = _read_stream(data, start, depth, iter(labels.tolist()))
    return RegionSet(Octree(bounds, depth, root, periodic), count, provenance)


def save(path, obj):
    data = serialize_regions(obj) if isinstance(obj, RegionSet) else serialize(obj)
    with open(path, "wb") as fh:
        fh.write(data)


def load(path, provenance: str | None = None):
    with open(path, "rb") as fh:
        data = fh.read()
    _, depth, _ = _read_header(data)
    _, end = _read_stream(data, 4 + _HEADER.size, depth)
    if end == len(data):
        return deserialize(data)
    return deserialize_regions(data, provenance or "component")


# ------------------------------------------------------ sampled fields --

@dataclass
class SampledField:
    """Adaptive partition driven by per-point integer codes.

    A leaf is uniform when its 8 corners and center share one code; uniform
    leaves carry that code in ``code``.  Leaves that stayed non-uniform at
    ``max_depth`` have ``code == -1`` and their nine sample codes (corners in
    child-index order, then center) in ``mixed_codes`` in the order of
    ``mixed_index``.  Leaves are in preorder.
    """
    bounds: Box3
    max_depth: int
    periodic: tuple
    leaves: LeafTable
    code: np.ndarray
    mixed_index: np.ndarray
    mixed_codes: np.ndarray
    evaluations: int

    def tree(self, leaf_mask) -> Octree:
        t = self.leaves
        return Octree.from_leaves(self.bounds, self.max_depth, t.level, t.ix, t.iy, t.iz,
                                  np.asarray(leaf_mask, np.int64), self.periodic)

    def sample_codes(self) -> np.ndarray:
        """(n_leaves, 9) codes; uniform leaves repeat their code."""
        out = np.repeat(self.code[:, None], 9, axis=1)
        out[self.mixed_index] = self.mixed_codes
        return out


class _PointCache:
    def __init__(self):
        self.keys = np.zeros(0, np.int64)
        self.vals = np.zeros(0, np.int64)

    def lookup(self, keys, point_of, fn):
        uk, inv = np.unique(keys, return_inverse=True)
        if len(self.keys):
            pos = np.clip(np.searchsorted(self.keys, uk), 0, len(self.keys) - 1)
            found = self.keys[pos] == uk
        else:
            pos = np.zeros(len(uk), np.int64)
            found = np.zeros(len(uk), bool)
        vals = np.empty(len(uk), np.int64)
        if found.any():
            vals[found] = self.vals[pos[found]]
        missing = ~found
        n_new = int(missing.sum())
        if n_new:
            new = np.asarray(fn(point_of(uk[missing])), np.int64)
            vals[missing] = new
            k = np.concatenate([self.keys, uk[missing]])
            v = np.concatenate([self.vals, new])
            order = np.argsort(k, kind="stable")
            self.keys, self.vals = k[order], v[order]
        return vals[inv].reshape(keys.shape), n_new


def sample_field(bounds: Box3, max_depth: int, point_fn, periodic=(False,) * 3,
                 min_depth: int = 0, split_fn=None) -> SampledField:
    """Adaptive sampling of an integer-valued point function.

    ``point_fn(points)`` maps an (n, 3) array to n integer codes.  Sample
    points live on a lattice of spacing ``cell(max_depth) / 2`` and are
    evaluated once each.  ``split_fn(level, lo, hi)`` may force extra cells to
    be treated as non-uniform.
    """
    _check_depth(max_depth)
    R = 1 << (max_depth + 1)
    lo0 = np.asarray(bounds.lo)
    size = bounds.size
    cache = _PointCache()
    evaluations = 0
    per = np.array(periodic, bool)

    def point_of(keys):
        lz = keys % (R + 1)
        ly = (keys // (R + 1)) % (R + 1)
        lx = keys // ((R + 1) * (R + 1))
        return lo0 + np.column_stack([lx, ly, lz]) / R * size

    c = np.arange(8)
    corner_off = np.column_stack([c & 1, (c >> 1) & 1, c >> 2])
    parts = []
    coords = np.zeros((1, 3), np.int64)
    for lv in range(max_depth + 1):
        if lv < min_depth and lv < max_depth:
            coords = _children(coords)
            continue
        step = 1 << (max_depth + 1 - lv)
        base = coords * step
        pts = np.concatenate([base[:, None, :] + corner_off[None] * step,
                              base[:, None, :] + step // 2], axis=1)
        pts[:, :, per] %= R
        keys = (pts[..., 0] * (R + 1) + pts[..., 1]) * (R + 1) + pts[..., 2]
        codes, n_new = cache.lookup(keys, point_of, point_fn)
        evaluations += n_new
        uniform = np.all(codes == codes[:, :1], axis=1)
        if split_fn is not None:
            cs = bounds.cell_size(lv)
            lo = lo0 + coords * cs
            uniform &= ~np.asarray(split_fn(lv, lo, lo + cs), bool)
        if lv == max_depth:
            parts.append((lv, coords, np.where(uniform, codes[:, 0], -1), codes))
            break
        parts.append((lv, coords[uniform], codes[uniform, 0], None))
        coords = _children(coords[~uniform])
        if len(coords) == 0:
            break
    level = np.concatenate([np.full(len(p[1]), p[0], np.int64) for p in parts])
    xyz = np.concatenate([p[1] for p in parts])
    code = np.concatenate([p[2] for p in parts])
    last = parts[-1]
    full9 = np.full((len(level), 9), -1, np.int64)
    if last[3] is not None:
        full9[len(level) - len(last[1]):] = last[3]
    order = np.argsort(_morton(level, xyz[:, 0], xyz[:, 1], xyz[:, 2], max_depth), kind="stable")
    table = LeafTable(level[order], xyz[order, 0], xyz[order, 1], xyz[order, 2],
                      np.zeros(len(order), np.int64))
    code = code[order]
    full9 = full9[order]
    mixed_index = np.flatnonzero(code < 0)
    return SampledField(bounds, max_depth, tuple(map(bool, periodic)), table, code,
                        mixed_index, full9[mixed_index], evaluations)
