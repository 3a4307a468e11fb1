"""Workspace / joint-space set analysis for the 3-RPR manipulator.

Two adaptive fields drive the pipeline:

* a joint-space field whose point code is the number of assembly modes of
  ``q``; its uniform cells split into connected components of constant
  count, and its non-uniform cells trace the locus where modes are born or
  die;
* a workspace field whose point code records W membership, the sign of
  det A and the FK sheet holding the pose.

A sheet is one continuous branch of the forward kinematics over a
joint-space component, traced by matching the modes of neighbouring joint
voxels.  Assembly modes appear or vanish only at type-2 singularities, so
inside the joint limits the image of the aspect boundaries is the locus
where the mode count jumps.  A cell of an aspect lies on a characteristic
surface when its samples see different sheets (or land on the jump locus).
The cells of one sheet make up one basic region, and their forward images
through the inverse kinematics are the basic components.
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components as graph_components

from rpr3 import manipulator as mk
from rpr3 import octree as ot
from rpr3.octree import Box3, Octree, RegionSet

log = logging.getLogger(__name__)

IN_W = 1
POSITIVE = 2
SHEET_SHIFT = 2
WORKSPACE_PERIODIC = (False, False, True)
JOINT_PERIODIC = (False, False, False)


@dataclass(frozen=True)
class AnalysisConfig:
    """Resolution and threshold settings of one analysis run."""
    workspace_box: Box3 = Box3((-33.0, -33.0, -math.pi), (33.0, 33.0, math.pi))
    joint_box: Box3 | None = None
    max_depth: int = 7
    joint_depth: int | None = None
    sheet_depth: int | None = None
    min_depth: int | None = None
    samples_per_cell: int = 9
    fk_samples: int = mk.FK_SAMPLES
    det_threshold: float = 0.5
    coincident_jaccard: float = 0.8
    disjoint_jaccard: float = 0.05
    min_region_cells: int = 8
    lookup_radius: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.samples_per_cell != 9:
            raise ValueError("cells are classified from 8 corners + center (9 samples)")
        if not (0 < self.disjoint_jaccard < self.coincident_jaccard <= 1):
            raise ValueError("need 0 < disjoint_jaccard < coincident_jaccard <= 1")
        if self.det_threshold <= 0 or self.min_region_cells < 0 or self.lookup_radius < 0:
            raise ValueError("thresholds must be non-negative")
        for d in (self.max_depth, self.jdepth):
            if not 1 <= d <= ot.DENSE_MAX_DEPTH:
                raise ValueError(f"depths must be in [1, {ot.DENSE_MAX_DEPTH}]")

    def joint_bounds(self, g) -> Box3:
        if self.joint_box is not None:
            return self.joint_box
        return Box3(tuple(g.rho_min), tuple(g.rho_max))

    @property
    def jdepth(self) -> int:
        return self.joint_depth or self.max_depth

    @property
    def sdepth(self) -> int:
        return self.sheet_depth or max(1, self.jdepth - 1)

    def mindepth(self, depth) -> int:
        if self.min_depth is not None:
            return min(self.min_depth, depth)
        return max(1, depth - 2)

    def to_dict(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            out[k] = {"lo": list(v.lo), "hi": list(v.hi)} if isinstance(v, Box3) else v
        return out


class Faults(list):
    """Stage-tagged fault log; entries are plain JSON-ready dicts."""

    def add(self, stage, message, **data):
        entry = {"stage": stage, "message": message}
        entry.update(data)
        log.warning("%s: %s", stage, message)
        self.append(entry)


# ------------------------------------------------------------- helpers --

def _sign_of_det(d):
    return np.where(d > 0, 1, -1)


def _linear_zero_test(g, centers, half):
    """True where a first-order model of det A vanishes inside the cell."""
    d0 = mk.det_a(g, centers)
    spread = np.zeros(len(centers))
    for a in range(3):
        h = np.zeros(3)
        h[a] = 1e-4 if a == 2 else 1e-3
        dp = mk.det_a(g, centers + h)
        dm = mk.det_a(g, centers - h)
        spread += np.abs((dp - dm) / (2 * h[a])) * half[a]
    return np.abs(d0) < spread


def _batched(fn, arr, size=20000):
    if len(arr) <= size:
        return fn(arr)
    return np.concatenate([fn(arr[i:i + size]) for i in range(0, len(arr), size)])


def _first_occurrence_order(labels, count):
    first = np.full(count, np.iinfo(np.int64).max)
    m = np.flatnonzero(labels >= 0)
    np.minimum.at(first, labels[m], m)
    order = np.empty(count, np.int64)
    order[np.argsort(first, kind="stable")] = np.arange(count)
    return order


def _absorb_small(depth, table, labels, count, min_cells, stage, faults):
    """Drop components smaller than ``min_cells`` voxels.

    Returns (labels, count, dropped-leaf mask).
    """
    dropped = np.zeros(len(labels), bool)
    if count == 0 or min_cells <= 0:
        return labels, count, dropped
    vox = 8.0 ** (depth - table.level)
    sel = labels >= 0
    sizes = np.bincount(labels[sel], weights=vox[sel], minlength=count)
    keep = sizes >= min_cells
    if keep.all():
        return labels, count, dropped
    faults.add(stage, f"absorbed {int((~keep).sum())} fragment(s) below "
               f"{min_cells} cells into the separating set",
               sizes=sorted(int(s) for s in sizes[~keep]))
    remap = np.full(count, -1)
    remap[keep] = np.arange(int(keep.sum()))
    dropped = sel & ~keep[np.maximum(labels, 0)]
    out = np.where(sel, remap[np.maximum(labels, 0)], -1)
    return out, int(keep.sum()), dropped


# -------------------------------------------------------- joint space --

@dataclass
class JointPartition:
    """Joint space split into connected sets of constant assembly-mode count.

    ``count`` is the mode count of uniform leaves (-1 on the jump locus),
    ``component`` the component id per leaf (-1 on the locus, outside Q or
    absorbed) and ``grid`` its dense voxel view.
    """
    field: ot.SampledField
    leaf_index: np.ndarray
    count: np.ndarray
    component: np.ndarray
    grid: np.ndarray
    multiplicity: list
    in_q: np.ndarray
    stats: dict

    @property
    def bounds(self) -> Box3:
        return self.field.bounds

    @property
    def depth(self) -> int:
        return self.field.max_depth

    @property
    def leaves(self) -> ot.LeafTable:
        return self.field.leaves

    def tree(self) -> Octree:
        """Q: FULL where some sample of the cell has at least one mode."""
        return self.field.tree(self.in_q.astype(np.int64))

    def component_at(self, rho) -> np.ndarray:
        rho = np.atleast_2d(rho)
        ijk, ok = ot.voxel_index(self.bounds, self.depth, JOINT_PERIODIC, rho)
        out = self.grid[ijk[:, 0], ijk[:, 1], ijk[:, 2]].astype(np.int64)
        out[~ok] = -1
        return out

    def components(self) -> RegionSet:
        return RegionSet.from_leaf_labels(self.bounds, self.depth, self.leaves, self.component,
                                          "component", JOINT_PERIODIC,
                                          {"multiplicity": list(self.multiplicity)})


def fk_count_codes(g, rho, fk_samples=mk.FK_SAMPLES):
    """Number of assembly modes per joint vector."""
    rho = np.asarray(rho, float)
    return _batched(lambda a: mk.fk_batch(g, a, fk_samples, polish=False).count
                    .astype(np.int64), rho)


def sample_joint_space(g, cfg: AnalysisConfig, faults: Faults | None = None) -> JointPartition:
    faults = Faults() if faults is None else faults
    bounds = cfg.joint_bounds(g)
    depth = cfg.jdepth
    t0 = time.perf_counter()
    fld = ot.sample_field(bounds, depth, lambda p: fk_count_codes(g, p, cfg.fk_samples),
                          JOINT_PERIODIC, cfg.mindepth(depth))
    t = fld.leaves
    in_q = fld.sample_codes().max(axis=1) > 0
    count = fld.code.copy()
    leaf_index = ot.rasterize(t, depth, np.arange(len(t), dtype=np.int32), np.int32)
    component = np.full(len(t), -1, np.int64)
    multiplicity = []
    for m in np.unique(count[count > 0]):
        lab, cnt = ot.leaf_components(t, leaf_index, count == m, depth, JOINT_PERIODIC)
        lab, cnt, _ = _absorb_small(depth, t, lab, cnt, cfg.min_region_cells,
                                    "joint_space", faults)
        sel = lab >= 0
        component[sel] = lab[sel] + len(multiplicity)
        multiplicity += [int(m)] * cnt
    odd = [m for m in multiplicity if m % 2]
    if odd:
        faults.add("joint_space", "components with an odd mode count", counts=odd)
    grid = component[leaf_index].astype(np.int32)
    stats = {"leaves": len(t), "evaluations": int(fld.evaluations)}
    log.info("joint field: %d leaves, %d samples, %d components, %.1fs", len(t),
             fld.evaluations, len(multiplicity), time.perf_counter() - t0)
    return JointPartition(fld, leaf_index, count, component, grid, multiplicity, in_q, stats)


def build_joint_space(g, cfg: AnalysisConfig) -> Octree:
    """Q alone: FULL where some sample of the cell has an assembly mode."""
    def point_fn(p):
        return (fk_count_codes(g, p, cfg.fk_samples) > 0).astype(np.int64)

    depth = cfg.jdepth
    fld = ot.sample_field(cfg.joint_bounds(g), depth, point_fn, JOINT_PERIODIC,
                          cfg.mindepth(depth))
    inside = (fld.sample_codes() > 0).any(axis=1)
    return fld.tree(inside.astype(np.int64))


@dataclass
class SheetAtlas:
    """Continuous FK branches ("sheets") over the joint-space components.

    The voxel centres of a dense joint grid carry their assembly modes.
    Modes of face-adjacent voxels of one component are matched by nearest
    pose and chained, so each connected sheet is one branch of the forward
    kinematics over its component.  ``slot`` maps grid voxels to rows of
    ``poses`` (-1 where the voxel is unusable); ``sens`` holds dX/dq of every
    stored mode and ``sign`` its det A sign.
    """
    geometry: mk.ManipulatorGeometry
    bounds: Box3
    depth: int
    slot: np.ndarray
    poses: np.ndarray
    count: np.ndarray
    centre: np.ndarray
    sens: np.ndarray
    sign: np.ndarray
    sheet: np.ndarray
    sheet_component: np.ndarray
    sheet_size: np.ndarray
    lever: float
    stats: dict

    @property
    def sheet_count(self) -> int:
        return len(self.sheet_component)

    def _distance(self, a, b):
        d = a - b
        d[..., 2] = mk.wrap_angle(d[..., 2])
        d[..., 2] *= self.lever
        return np.sqrt(np.sum(d * d, axis=-1))

    def sheet_of(self, X, rho=None, ratio=2.0) -> np.ndarray:
        """Sheet holding each pose, from the modes stored at the voxel of g(X).

        Stored modes of the same det A sign are carried to ``g(X)`` to first
        order and compared with X.  Returns -1 when the voxel is unusable or
        when the nearest prediction is not ``ratio`` times closer than the
        runner-up.
        """
        X = np.atleast_2d(np.asarray(X, float))
        rho = mk.ik_array(self.geometry, X) if rho is None else np.atleast_2d(rho)
        ijk, ok = ot.voxel_index(self.bounds, self.depth, JOINT_PERIODIC, rho)
        s = self.slot[ijk[:, 0], ijk[:, 1], ijk[:, 2]].astype(np.int64)
        s[~ok] = -1
        out = np.full(len(X), -1, np.int64)
        sel = np.flatnonzero(s >= 0)
        if len(sel) == 0:
            return out
        rows = s[sel]
        dq = rho[sel] - self.centre[rows]
        pred = self.poses[rows] + np.einsum("nkij,nj->nki", self.sens[rows], dq)
        d = self._distance(pred, X[sel, None, :])
        sx = _sign_of_det(mk.det_a(self.geometry, X[sel]))
        bad = (np.arange(d.shape[1])[None, :] >= self.count[rows, None]) | \
            (self.sign[rows] != sx[:, None])
        d[bad] = np.inf
        order = np.argsort(d, axis=1)
        best = d[np.arange(len(sel)), order[:, 0]]
        second = d[np.arange(len(sel)), order[:, 1]]
        clear = np.isfinite(best) & (second >= ratio * best)
        out[sel[clear]] = self.sheet[rows[clear], order[clear, 0]]
        return out


def build_sheets(g, jp: JointPartition, cfg: AnalysisConfig, faults: Faults) -> SheetAtlas:
    depth = cfg.sdepth
    bounds = jp.bounds
    t0 = time.perf_counter()
    n = 1 << depth
    h = bounds.cell_size(depth)
    axes = [bounds.lo[i] + (np.arange(n) + 0.5) * h[i] for i in range(3)]
    centres = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    comp = jp.component_at(centres)
    mult = np.asarray(jp.multiplicity + [0], np.int64)
    cand = np.flatnonzero(comp >= 0)
    fk = mk.fk_batch(g, centres[cand], cfg.fk_samples)
    good = fk.count == mult[comp[cand]]
    used = cand[good]
    slot = np.full(n ** 3, -1, np.int64)
    slot[used] = np.arange(len(used))
    poses = fk.poses[good]
    count = fk.count[good].astype(np.int64)
    k = poses.shape[1]
    lever = max(g.l2, g.l3)
    centre = centres[used]
    live = np.arange(k)[None, :] < count[:, None]
    sens = np.zeros(poses.shape + (3,))
    sign = np.zeros(live.shape, np.int64)
    A = mk.jacobian_a_array(g, poses[live])
    # A dX = 2 rho dq on the constraint manifold
    rhs = np.broadcast_to(np.eye(3), A.shape) * 2.0 * np.repeat(centre, count, axis=0)[:, None, :]
    with np.errstate(all="ignore"):
        sv = np.linalg.solve(A, rhs)
    sens[live] = np.where(np.isfinite(sv), sv, 0.0)
    sign[live] = _sign_of_det(np.linalg.det(A))
    atlas = SheetAtlas(g, bounds, depth, slot.reshape(n, n, n), poses, count, centre, sens, sign,
                       np.full((len(used), k), -1, np.int64), np.zeros(0, np.int64),
                       np.zeros(0, np.int64), lever, {})
    rows, cols = [], []
    rejected = 0
    idx = slot.reshape(n, n, n)
    for axis in range(3):
        a = np.take(idx, np.arange(n - 1), axis=axis).ravel()
        b = np.take(idx, np.arange(1, n), axis=axis).ravel()
        m = (a >= 0) & (b >= 0)
        a, b = a[m], b[m]
        m = comp[used[a]] == comp[used[b]]
        a, b = a[m], b[m]
        for c in np.unique(count[a]):
            s = count[a] == c
            aa, bb = a[s], b[s]
            d = atlas._distance(poses[aa, :c, None, :], poses[bb, None, :c, :])
            fwd = d.argmin(axis=2)
            back = d.argmin(axis=1)
            bij = np.all(np.take_along_axis(back, fwd, axis=1) == np.arange(c), axis=1)
            rejected += int((~bij).sum())
            aa, bb, fwd = aa[bij], bb[bij], fwd[bij]
            rows.append((aa[:, None] * k + np.arange(c)).ravel())
            cols.append((bb[:, None] * k + fwd).ravel())
    nodes = len(used) * k
    rows = np.concatenate(rows) if rows else np.zeros(0, np.int64)
    cols = np.concatenate(cols) if cols else np.zeros(0, np.int64)
    _, lab = graph_components(coo_matrix((np.ones(len(rows)), (rows, cols)),
                                         shape=(nodes, nodes)), directed=False)
    valid = (np.arange(k)[None, :] < count[:, None]).ravel()
    node_comp = np.repeat(comp[used], k)
    vl = lab[valid]
    uniq, first, sizes = np.unique(vl, return_index=True, return_counts=True)
    keep = sizes >= max(1, cfg.min_region_cells)
    if (~keep).any():
        faults.add("sheets", f"dropped {int((~keep).sum())} isolated sheet piece(s)",
                   sizes=sorted(int(v) for v in sizes[~keep]))
    node_ids = np.flatnonzero(valid)
    sc = node_comp[node_ids[first]]
    # sheets ordered by component, then by their first voxel
    order = np.lexsort((first, sc))
    order = order[keep[order]]
    remap = np.full(len(uniq), -1, np.int64)
    remap[order] = np.arange(len(order))
    sheet = np.full(nodes, -1, np.int64)
    sheet[valid] = remap[np.searchsorted(uniq, vl)]
    atlas.sheet = sheet.reshape(len(used), k)
    atlas.sheet_component = sc[order]
    atlas.sheet_size = sizes[order]
    per = np.bincount(atlas.sheet_component, minlength=len(jp.multiplicity))
    for c, (m_, s_) in enumerate(zip(jp.multiplicity, per)):
        if m_ != s_:
            faults.add("sheets", f"component {c} carries {int(s_)} sheet(s) for "
                       f"{m_} modes", component=c)
    atlas.stats = {"voxels": int(len(used)), "rejected_links": rejected,
                   "unusable_voxels": int((~good).sum())}
    log.info("sheets: %d over %d components, %.1fs", atlas.sheet_count,
             len(jp.multiplicity), time.perf_counter() - t0)
    return atlas


# ---------------------------------------------------------- workspace --

def workspace_codes(g, points, atlas: SheetAtlas | None):
    """Point codes ``in_W | positive << 1 | (sheet + 1) << 2``.

    The sheet term is 0 when ``g(X)`` falls on the jump locus, when the sheet
    is ambiguous there, or when no atlas is supplied.
    """
    points = np.asarray(points, float)
    codes = np.where(mk.det_a(g, points) > 0, POSITIVE, 0).astype(np.int64)
    rho = mk.ik_array(g, points)
    inside = mk.limits_mask(g, rho)
    codes[inside] |= IN_W
    if atlas is not None and inside.any():
        codes[inside] |= (atlas.sheet_of(points[inside], rho[inside]) + 1) << SHEET_SHIFT
    return codes


def _decode(codes):
    inw = (codes & IN_W) > 0
    pos = (codes & POSITIVE) > 0
    comp = (codes >> SHEET_SHIFT) - 1
    return inw, pos, comp


@dataclass
class WorkspaceField:
    """Workspace partition with per-leaf W, sign and sheet attributes."""
    field: ot.SampledField
    leaf_index: np.ndarray
    in_w: np.ndarray
    singular: np.ndarray
    positive: np.ndarray
    sheet: np.ndarray
    sheet_varies: np.ndarray
    stats: dict

    @property
    def leaves(self) -> ot.LeafTable:
        return self.field.leaves

    @property
    def bounds(self) -> Box3:
        return self.field.bounds

    @property
    def depth(self) -> int:
        return self.field.max_depth

    def tree(self, mask) -> Octree:
        return self.field.tree(np.asarray(mask, np.int64))

    def voxel_volume(self) -> float:
        return self.bounds.volume / 8.0 ** self.depth


def sample_workspace(g, cfg: AnalysisConfig, atlas: SheetAtlas | None) -> WorkspaceField:
    depth = cfg.max_depth
    bounds = cfg.workspace_box
    t0 = time.perf_counter()

    def split_fn(level, lo, hi):
        return _linear_zero_test(g, 0.5 * (lo + hi),
                                 0.5 * cfg.det_threshold * bounds.cell_size(level))

    def point_fn(p):
        return _batched(lambda a: workspace_codes(g, a, atlas), p, 1 << 18)

    fld = ot.sample_field(bounds, depth, point_fn, WORKSPACE_PERIODIC,
                          cfg.mindepth(depth), split_fn)
    t = fld.leaves
    inw9, pos9, comp9 = _decode(fld.sample_codes())
    in_w = inw9.any(axis=1)
    # the sign test uses every sample so S cannot leak along the W boundary
    both = pos9.any(axis=1) & ~pos9.all(axis=1)
    positive = pos9.all(axis=1)
    forced = np.zeros(len(t), bool)
    deep = np.flatnonzero((t.level == depth) & in_w & ~both)
    if len(deep):
        forced[deep] = _linear_zero_test(g, t.centers(bounds)[deep],
                                         0.5 * cfg.det_threshold * bounds.cell_size(depth))
    singular = in_w & (both | forced)
    # unknown samples (jump locus, ambiguous match) do not count as a change
    known = inw9 & (comp9 >= 0)
    big = np.iinfo(np.int64).max
    cmax = np.where(known, comp9, -1).max(axis=1)
    cmin = np.where(known, comp9, big).min(axis=1)
    varies = in_w & known.any(axis=1) & (cmax != cmin)
    sheet = np.where(in_w & ~varies, cmax, -1)
    stats = {"leaves": len(t), "evaluations": int(fld.evaluations)}
    log.info("workspace field: %d leaves, %d samples, %.1fs", len(t), fld.evaluations,
             time.perf_counter() - t0)
    leaf_index = ot.rasterize(t, depth, np.arange(len(t), dtype=np.int32), np.int32)
    return WorkspaceField(fld, leaf_index, in_w, singular, positive, sheet, varies, stats)


def build_workspace(g, cfg: AnalysisConfig) -> Octree:
    """W alone: FULL where some sample of the cell lies within the joint limits."""
    def point_fn(p):
        return mk.limits_mask(g, mk.ik_array(g, p)).astype(np.int64)

    fld = ot.sample_field(cfg.workspace_box, cfg.max_depth, point_fn,
                          WORKSPACE_PERIODIC, cfg.mindepth(cfg.max_depth))
    inside = (fld.sample_codes() > 0).any(axis=1)
    return fld.tree(inside.astype(np.int64))


def _components(wf: WorkspaceField, mask):
    return ot.leaf_components(wf.leaves, wf.leaf_index, mask, wf.depth, WORKSPACE_PERIODIC)


def build_singular_surface(wf: WorkspaceField) -> RegionSet:
    labels, _ = _components(wf, wf.singular)
    return RegionSet.from_leaf_labels(wf.bounds, wf.depth, wf.leaves, labels,
                                      "singular_surface", WORKSPACE_PERIODIC)


def build_aspects(wf: WorkspaceField, faults: Faults, min_cells=0):
    """Components of W - S; returns (RegionSet, leaf labels, absorbed mask)."""
    labels, count = _components(wf, wf.in_w & ~wf.singular)
    labels, count, dropped = _absorb_small(wf.depth, wf.leaves, labels, count, min_cells,
                                           "aspects", faults)
    signs = []
    for a in range(count):
        m = labels == a
        npos = int(np.sum(wf.positive[m]))
        if 0 < npos < int(m.sum()):
            faults.add("aspects", f"aspect {a} has mixed det A signs "
                       "(resolution too coarse)", positive=npos, cells=int(m.sum()))
        signs.append(1 if npos * 2 >= int(m.sum()) else -1)
    rs = RegionSet.from_leaf_labels(wf.bounds, wf.depth, wf.leaves, labels, "aspect",
                                    WORKSPACE_PERIODIC, {"sign": signs})
    return rs, labels, dropped


def characteristic_mask(wf: WorkspaceField, aspect_labels, aspect: int) -> np.ndarray:
    """Cells of one aspect whose image meets the jump locus of the mode count.

    Such cells see more than one sheet (or none) among their samples.
    """
    return (aspect_labels == aspect) & (wf.sheet_varies | (wf.sheet < 0))


def build_characteristic_surfaces(wf: WorkspaceField, aspect_labels, aspect: int) -> RegionSet:
    labels, _ = _components(wf, characteristic_mask(wf, aspect_labels, aspect))
    return RegionSet.from_leaf_labels(wf.bounds, wf.depth, wf.leaves, labels,
                                      "characteristic_surface", WORKSPACE_PERIODIC,
                                      {"aspect": aspect})


def build_basic_regions(wf: WorkspaceField, atlas: SheetAtlas, jp: JointPartition,
                        aspect_labels, aspect_signs, sc_masks, faults: Faults, min_cells=0):
    """Basic regions as the workspace cells of each FK sheet.

    Every sheet maps one-to-one onto its joint component, so the cells of an
    aspect off S_c that carry one sheet form one basic region.  Regions are
    numbered by their first leaf in preorder.  Detached specks smaller than
    ``min_cells`` voxels go back to S_c.  Returns (leaf labels, count, attrs,
    sheet -> region map).
    """
    cand = (aspect_labels >= 0) & (wf.sheet >= 0)
    for a in range(len(aspect_signs)):
        cand &= ~sc_masks[a]
    sheet = np.where(cand, wf.sheet, -1)
    present = np.unique(sheet[sheet >= 0])
    missing = sorted(set(range(atlas.sheet_count)) - set(present.tolist()))
    if missing:
        faults.add("basic_regions", f"{len(missing)} sheet(s) hold no workspace cell "
                   "at this resolution", sheets=missing)
    to_dense = np.full(atlas.sheet_count + 1, -1, np.int64)
    to_dense[present] = np.arange(len(present))
    labels = np.where(sheet >= 0, to_dense[np.maximum(sheet, 0)], -1)
    count = len(present)
    order = _first_occurrence_order(labels, count)
    labels = np.where(labels >= 0, order[np.maximum(labels, 0)], -1)
    sheet_region = np.full(atlas.sheet_count, -1, np.int64)
    sheet_region[present] = order
    region_sheet = np.argsort(order)
    attrs = {"aspect": [], "sign": [], "component": [], "multiplicity": [], "sheet": [],
             "pieces": []}
    split = []
    specks = 0
    vox = 8.0 ** (wf.depth - wf.leaves.level)
    for r in range(count):
        m = labels == r
        lab, pieces = _components(wf, m)
        if pieces > 1 and min_cells > 0:
            size = np.bincount(lab[m], weights=vox[m], minlength=pieces)
            small = (size < min_cells) & (np.arange(pieces) != np.argmax(size))
            if small.any():
                drop = m & small[np.maximum(lab, 0)]
                labels[drop] = -1
                m &= ~drop
                specks += int(small.sum())
                pieces -= int(small.sum())
        asp = np.bincount(aspect_labels[m], minlength=len(aspect_signs))
        if np.count_nonzero(asp) > 1:
            faults.add("basic_regions", f"region {r} spans {np.count_nonzero(asp)} aspects",
                       region=r)
        a = int(np.argmax(asp))
        s = int(present[region_sheet[r]])
        c = int(atlas.sheet_component[s])
        if pieces > 1:
            split.append(r)
        attrs["aspect"].append(a)
        attrs["sign"].append(int(aspect_signs[a]))
        attrs["component"].append(c)
        attrs["multiplicity"].append(int(jp.multiplicity[c]))
        attrs["sheet"].append(s)
        attrs["pieces"].append(int(pieces))
    if specks:
        faults.add("basic_regions", f"moved {specks} speck(s) below {min_cells} cells "
                   "into the characteristic surfaces")
    if split:
        faults.add("basic_regions", f"{len(split)} region(s) fall into several voxel "
                   "pieces at this resolution", regions=split)
    return labels, count, attrs, sheet_region


# --------------------------------------------------- region lookups --

class RegionLookup:
    """Locate workspace points in labeled leaves via the dense voxel grid.

    ``signs`` and ``keys`` (per label) guard the fallback search: a point on
    an unlabeled voxel gets the nearest label within ``radius`` voxels whose
    sign matches and whose key matches (a query key of -1 matches any key).
    """

    def __init__(self, wf: WorkspaceField, leaf_labels, signs, keys, radius=2):
        self.bounds = wf.bounds
        self.depth = wf.depth
        self.grid = np.asarray(leaf_labels)[wf.leaf_index].astype(np.int32)
        self.signs = np.asarray(signs, np.int64)
        self.keys = np.asarray(keys, np.int64)
        rng = np.arange(-radius, radius + 1)
        off = np.array(list(itertools.product(rng, rng, rng)))
        d = np.abs(off).sum(axis=1)
        self.offsets = off[np.argsort(d, kind="stable")][1:]
        self.radius = radius

    def voxels(self, poses):
        return ot.voxel_index(self.bounds, self.depth, WORKSPACE_PERIODIC, poses)

    def strict(self, poses):
        poses = np.atleast_2d(poses)
        ijk, ok = self.voxels(poses)
        out = self.grid[ijk[:, 0], ijk[:, 1], ijk[:, 2]].astype(np.int64)
        out[~ok] = -1
        return out

    def _neighbours(self, ijk, radius):
        offs = self.offsets[np.abs(self.offsets).max(axis=1) <= radius]
        n = self.grid.shape[0]
        cand = ijk[:, None, :] + offs[None, :, :]
        cand[..., 2] %= n
        inside = np.all((cand[..., :2] >= 0) & (cand[..., :2] < n), axis=2)
        cand = np.clip(cand, 0, n - 1)
        return np.where(inside, self.grid[cand[..., 0], cand[..., 1], cand[..., 2]], -1)

    def resolve(self, poses, sign, key, radius=None, chunk=20000):
        """Strict lookup, then the nearest compatible label within ``radius``."""
        poses = np.atleast_2d(poses)
        out = self.strict(poses)
        r = self.radius if radius is None else radius
        todo = np.flatnonzero(out < 0)
        if len(todo) == 0 or r == 0 or len(self.signs) == 0:
            return out
        sign = np.broadcast_to(np.asarray(sign), (len(poses),))
        key = np.broadcast_to(np.asarray(key), (len(poses),))
        for a in range(0, len(todo), chunk):
            idx = todo[a:a + chunk]
            ijk, ok = self.voxels(poses[idx])
            lab = self._neighbours(ijk, r)
            lab[~ok] = -1
            safe = np.maximum(lab, 0)
            good = (lab >= 0) & (self.signs[safe] == sign[idx][:, None])
            k = key[idx][:, None]
            good &= (k < 0) | (self.keys[safe] == k)
            hit = good.any(axis=1)
            first = np.argmax(good, axis=1)
            out[idx[hit]] = lab[hit, first[hit]]
        return out

    def near_boundary(self, poses, radius=1):
        """True where an unlabeled voxel lies within ``radius`` voxels."""
        poses = np.atleast_2d(poses)
        ijk, ok = self.voxels(poses)
        lab = self._neighbours(ijk, radius)
        return ~ok | np.any(lab < 0, axis=1) | (self.strict(poses) < 0)


def locate_solutions(g, lookup: RegionLookup, jp: JointPartition, rho, fk: mk.FKBatch,
                     radius=None):
    """Basic-region label of every FK solution (-1 unresolved, -2 padding)."""
    m, k = fk.det_a.shape
    valid = np.arange(k)[None, :] < fk.count[:, None]
    sign = _sign_of_det(np.nan_to_num(fk.det_a))
    key = np.repeat(jp.component_at(np.atleast_2d(rho))[:, None], k, axis=1)
    out = np.full((m, k), -2, np.int64)
    if valid.any():
        out[valid] = lookup.resolve(fk.poses[valid], sign[valid], key[valid], radius)
    return out


def attribute_points(g, lookup: RegionLookup, jp: JointPartition, X, radius=None,
                     atlas: SheetAtlas | None = None, sheet_region=None):
    """Basic region of workspace points.

    The sheet of the pose decides when it is known; otherwise the nearest
    region with the same det A sign and image component is used.
    """
    X = np.atleast_2d(X)
    rho = mk.ik_array(g, X)
    inside = mk.limits_mask(g, rho)
    out = np.full(len(X), -1, np.int64)
    if not inside.any():
        return out
    idx = np.flatnonzero(inside)
    comp = jp.component_at(rho[idx])
    if atlas is not None:
        s = atlas.sheet_of(X[idx], rho[idx])
        s[(s >= 0) & (atlas.sheet_component[np.maximum(s, 0)] != comp)] = -1
        out[idx] = np.where(s >= 0, sheet_region[np.maximum(s, 0)], -1)
        comp = comp[out[idx] < 0]
        idx = idx[out[idx] < 0]
    if len(idx):
        sign = _sign_of_det(mk.det_a(g, X[idx]))
        out[idx] = lookup.resolve(X[idx], sign, comp, radius)
    return out


# ------------------------------------------------------ forward images --

def image_subsamples(g, wbounds: Box3, wdepth: int, jbounds: Box3, jdepth: int):
    """Per-voxel sub-sample counts so adjacent image samples are <= 1 joint voxel apart.

    Uses |d rho / dx|, |d rho / dy| <= 1 and |d rho / d phi| <= max(l2, l3).
    """
    hw = wbounds.cell_size(wdepth)
    hq = float(np.min(jbounds.cell_size(jdepth)))
    lever = max(g.l2, g.l3)
    return tuple(int(max(1, math.ceil(v / hq - 1e-9))) for v in (hw[0], hw[1], lever * hw[2]))


def _leaf_subsamples(wf: WorkspaceField, leaves, k, chunk):
    """Yield (points, leaf) blocks of cell-centred sub-samples of the given leaves."""
    t = wf.leaves
    for lv in np.unique(t.level[leaves]):
        sel = leaves[t.level[leaves] == lv]
        m = np.asarray(k) * (1 << (wf.depth - int(lv)))
        grids = np.meshgrid(*[(np.arange(c) + 0.5) / c for c in m], indexing="ij")
        offsets = np.stack(grids, -1).reshape(-1, 3)
        size = wf.bounds.cell_size(int(lv))
        lo = np.asarray(wf.bounds.lo) + np.column_stack([t.ix[sel], t.iy[sel], t.iz[sel]]) * size
        per = max(1, chunk // len(offsets))
        for a in range(0, len(sel), per):
            b = slice(a, a + per)
            pts = (lo[b, None, :] + offsets[None] * size).reshape(-1, 3)
            leaf = np.repeat(sel[b], len(offsets))
            for c0 in range(0, len(pts), chunk):
                yield pts[c0:c0 + chunk], leaf[c0:c0 + chunk]


@dataclass
class ComponentImages:
    """Forward images of the basic regions as sorted joint-voxel index arrays."""
    bounds: Box3
    depth: int
    voxels: list
    subsamples: tuple
    samples: int

    @property
    def shape(self):
        n = 1 << self.depth
        return (n, n, n)

    def mask(self, r) -> np.ndarray:
        m = np.zeros(int(np.prod(self.shape)), bool)
        m[self.voxels[r]] = True
        return m.reshape(self.shape)

    def tree(self, r) -> Octree:
        return Octree.from_dense(self.bounds, self.mask(r).astype(np.int64))

    def counts(self) -> np.ndarray:
        n = int(np.prod(self.shape))
        if not self.voxels:
            return np.zeros(self.shape, np.int64)
        return np.bincount(np.concatenate(self.voxels), minlength=n).reshape(self.shape)

    def linear_index(self, rho):
        ijk, ok = ot.voxel_index(self.bounds, self.depth, JOINT_PERIODIC, np.atleast_2d(rho))
        n = 1 << self.depth
        return (ijk[:, 0] * n + ijk[:, 1]) * n + ijk[:, 2], ok

    def contains(self, r, rho) -> np.ndarray:
        lin, ok = self.linear_index(rho)
        v = self.voxels[r]
        if len(v) == 0:
            return np.zeros(len(lin), bool)
        pos = np.clip(np.searchsorted(v, lin), 0, len(v) - 1)
        return ok & (v[pos] == lin)


def build_basic_components(g, wf: WorkspaceField, count: int, cfg: AnalysisConfig,
                           attribute, chunk=1 << 20):
    """Joint-space images g(WAb_i) from dense workspace samples pushed through IK.

    Every leaf of W is sub-sampled at cell-centred points fine enough that
    consecutive image samples land in the same or a neighbouring joint
    voxel.  ``attribute(points)`` names the basic region of each sample
    (-1 for none), so a large leaf straddling a characteristic surface
    feeds both sides.  A one-voxel closing fills the remaining pinholes.
    """
    jb = cfg.joint_bounds(g)
    jd = cfg.jdepth
    k = image_subsamples(g, wf.bounds, wf.depth, jb, jd)
    n = 1 << jd
    n3 = n ** 3
    parts = [[] for _ in range(count)]
    total = 0
    jlo, jsize = np.asarray(jb.lo), jb.size
    for pts, _ in _leaf_subsamples(wf, np.flatnonzero(wf.in_w), k, chunk):
        lab = attribute(pts)
        rho = mk.ik_array(g, pts)
        ok = mk.limits_mask(g, rho) & (lab >= 0)
        u = (rho[ok] - jlo) / jsize
        inb = np.all((u >= 0) & (u <= 1), axis=1)
        ijk = np.clip(np.floor(u[inb] * n).astype(np.int64), 0, n - 1)
        lin = (ijk[:, 0] * n + ijk[:, 1]) * n + ijk[:, 2]
        total += len(lin)
        key = np.unique(lab[ok][inb] * n3 + lin)
        rr, vv = np.divmod(key, n3)
        cuts = np.searchsorted(rr, np.arange(count + 1))
        for r in range(count):
            if cuts[r + 1] > cuts[r]:
                parts[r].append(vv[cuts[r]:cuts[r + 1]])
    struct = ndimage.generate_binary_structure(3, 3)
    voxels = []
    for r in range(count):
        ids = np.unique(np.concatenate(parts[r])) if parts[r] else np.zeros(0, np.int64)
        mask = np.zeros(n3, bool)
        mask[ids] = True
        mask = np.pad(mask.reshape(n, n, n), 1, mode="edge")
        mask = ndimage.binary_closing(mask, struct)[1:-1, 1:-1, 1:-1]
        voxels.append(np.flatnonzero(mask.ravel()))
    log.info("component images: %d samples", total)
    return ComponentImages(jb, jd, voxels, tuple(int(v) for v in k), total)


def jaccard_matrix(images: ComponentImages) -> np.ndarray:
    c = len(images.voxels)
    jac = np.eye(c)
    sizes = [len(v) for v in images.voxels]
    for i in range(c):
        for j in range(i + 1, c):
            inter = len(np.intersect1d(images.voxels[i], images.voxels[j], assume_unique=True))
            union_ = sizes[i] + sizes[j] - inter
            jac[i, j] = jac[j, i] = inter / union_ if union_ else 0.0
    return jac


def coincidence_classes(jac, cfg: AnalysisConfig, faults: Faults):
    """Equivalence classes of the coincidence relation plus the faulty pairs."""
    n = len(jac)
    coincident = jac >= cfg.coincident_jaccard
    middle = (jac > cfg.disjoint_jaccard) & ~coincident
    pairs = [(int(i), int(j), float(jac[i, j]))
             for i, j in zip(*np.nonzero(np.triu(middle, 1)))]
    for i, j, v in pairs:
        faults.add("basic_components", f"components {i} and {j} are neither "
                   f"coincident nor disjoint (Jaccard {v:.3f})", pair=[i, j], jaccard=v)
    if n == 0:
        return [], pairs
    ncomp, lab = graph_components(coo_matrix(coincident.astype(float)), directed=False)
    classes = sorted(sorted(np.flatnonzero(lab == c).tolist()) for c in range(ncomp))
    return classes, pairs


def multiplicity_map(images: ComponentImages) -> RegionSet:
    """Joint-space cells labeled by how many basic components cover them."""
    counts = images.counts()
    values = np.unique(counts)
    labels = np.searchsorted(values, counts)
    return RegionSet(Octree.from_dense(images.bounds, labels + 1), len(values),
                     "multiplicity", {"multiplicity": values.tolist()})


# ---------------------------------------------------- uniqueness domains --

def _shifted(grid, axis, k):
    out = np.roll(grid, k, axis=axis)
    if axis != 2:
        edge = [slice(None)] * 3
        edge[axis] = slice(0, k) if k > 0 else slice(k, None)
        out[tuple(edge)] = -1
    return out


def region_adjacency(region_grid, sep_grid, count, reach=2):
    """Pairs of regions adjacent directly or across separator voxels."""
    pairs = set()
    for axis in range(3):
        nb = _shifted(region_grid, axis, 1)
        m = (region_grid >= 0) & (nb >= 0) & (region_grid != nb)
        pairs.update(zip(region_grid[m].tolist(), nb[m].tolist()))
    cols = []
    for axis in range(3):
        for k in range(1, reach + 1):
            for s in (k, -k):
                cols.append(_shifted(region_grid, axis, s)[sep_grid])
    if cols:
        mat = np.stack(cols, axis=1)
        for i in range(mat.shape[1]):
            for j in range(i + 1, mat.shape[1]):
                a, b = mat[:, i], mat[:, j]
                m = (a >= 0) & (b >= 0) & (a != b)
                if m.any():
                    pairs.update(zip(a[m].tolist(), b[m].tolist()))
    adj = np.zeros((count, count), bool)
    for a, b in pairs:
        adj[a, b] = adj[b, a] = True
    return adj


def _connected_groups(n, conflict, adjacency, limit):
    """All connected, pairwise conflict-free vertex subsets (as sorted tuples)."""
    nbrs = [set(np.flatnonzero(adjacency[v]).tolist()) for v in range(n)]
    out = []

    def grow(group, frontier, v0):
        out.append(tuple(sorted(group)))
        if len(out) > limit:
            raise OverflowError
        frontier = sorted(frontier)
        for i, w in enumerate(frontier):
            if any(conflict[w, u] for u in group):
                continue
            later = set(frontier[i + 1:])
            extra = {u for u in nbrs[w] if u > v0 and u not in group
                     and u not in frontier[:i + 1]}
            grow(group | {w}, later | extra, v0)

    for v in range(n):
        grow({v}, {u for u in nbrs[v] if u > v}, v)
    return sorted(set(out))


def partition_regions(ids, conflict, adjacency, limit=200000):
    """Fewest groups of ids, each connected under ``adjacency`` and conflict free.

    Candidate groups are enumerated and covered exactly with branch and
    bound; ties go to the lexicographically first list of groups.  Returns
    (groups, exact) where ``exact`` is false when the search was cut off and a
    greedy cover was used instead.
    """
    ids = list(ids)
    n = len(ids)
    if n == 0:
        return [], True
    sub_c = conflict[np.ix_(ids, ids)]
    sub_a = adjacency[np.ix_(ids, ids)]
    try:
        groups = _connected_groups(n, sub_c, sub_a, limit)
    except OverflowError:
        groups = None
    if groups is not None:
        by_min = [[] for _ in range(n)]
        for gr in groups:
            by_min[gr[0]].append(gr)
        for lst in by_min:
            lst.sort(key=lambda gr: (-len(gr), gr))
        best = [None]
        budget = [limit]

        def rec(covered, chosen):
            if best[0] is not None and len(chosen) >= len(best[0]):
                return
            budget[0] -= 1
            if budget[0] < 0:
                raise OverflowError
            r = next((i for i in range(n) if not covered >> i & 1), None)
            if r is None:
                best[0] = list(chosen)
                return
            for gr in by_min[r]:
                mask = sum(1 << i for i in gr)
                if mask & covered:
                    continue
                chosen.append(gr)
                rec(covered | mask, chosen)
                chosen.pop()

        try:
            rec(0, [])
            return [[ids[i] for i in gr] for gr in sorted(best[0])], True
        except OverflowError:
            pass
    left = set(range(n))
    out = []
    while left:
        gr = [min(left)]
        left.discard(gr[0])
        grew = True
        while grew:
            grew = False
            for v in sorted(left):
                if any(sub_a[v, u] for u in gr) and not any(sub_c[v, u] for u in gr):
                    gr.append(v)
                    left.discard(v)
                    grew = True
        out.append(sorted(ids[i] for i in gr))
    return sorted(out), False


def build_uniqueness_domains(wf: WorkspaceField, br_labels, br_attrs, sc_masks,
                             jac, cfg: AnalysisConfig, faults: Faults):
    """Per aspect, the fewest connected groups of basic regions with disjoint images.

    Each group plus the characteristic-surface cells lying only between its
    own regions forms one uniqueness domain.
    """
    count = len(br_attrs["aspect"])
    region_grid = br_labels[wf.leaf_index]
    if sc_masks:
        sc_any = np.logical_or.reduce(sc_masks, axis=0)
    else:
        sc_any = np.zeros(len(br_labels), bool)
    sep_grid = sc_any[wf.leaf_index]
    adjacency = region_adjacency(region_grid, sep_grid, count)
    conflict = jac > cfg.disjoint_jaccard
    np.fill_diagonal(conflict, False)
    aspects = np.asarray(br_attrs["aspect"], int)
    groups, group_aspect = [], []
    for a in np.unique(aspects):
        ids = np.flatnonzero(aspects == a).tolist()
        part, exact = partition_regions(ids, conflict, adjacency)
        if not exact:
            faults.add("uniqueness_domains", f"partition search for aspect {int(a)} "
                       "hit its budget; a greedy cover was used")
        for gr in part:
            groups.append(sorted(gr))
            group_aspect.append(int(a))
    region_group = np.full(count + 1, -1)
    for k, gr in enumerate(groups):
        region_group[gr] = k
    labels = np.where(br_labels >= 0, region_group[np.maximum(br_labels, 0)], -1)
    if sc_any.any():
        gg = np.where(region_grid >= 0, region_group[np.maximum(region_grid, 0)], -1)
        cols = [gg] + [_shifted(gg, axis, k) for axis in range(3) for k in (1, 2, -1, -2)]
        stack = np.stack([c[sep_grid] for c in cols], axis=1)
        lo = np.where(stack >= 0, stack, np.iinfo(np.int64).max).min(axis=1)
        hi = stack.max(axis=1)
        vox_group = np.where((hi >= 0) & (lo == hi), hi, -1)
        leaf_of = wf.leaf_index[sep_grid]
        best = np.full(len(br_labels), -2, np.int64)
        np.maximum.at(best, leaf_of, vox_group)
        worst = np.full(len(br_labels), np.iinfo(np.int64).max)
        np.minimum.at(worst, leaf_of, vox_group)
        ok = sc_any & (best >= 0) & (best == worst)
        labels[ok] = best[ok]
    attrs = {"aspect": group_aspect, "regions": groups}
    rs = RegionSet.from_leaf_labels(wf.bounds, wf.depth, wf.leaves, labels,
                                    "uniqueness_domain", WORKSPACE_PERIODIC, attrs)
    return rs, labels, adjacency


# --------------------------------------------------------------- bundle --

@dataclass
class AnalysisBundle:
    """Every set produced by one analysis run, plus lookups and the fault log."""
    geometry: mk.ManipulatorGeometry
    config: AnalysisConfig
    joint: JointPartition
    atlas: SheetAtlas
    sheet_region: np.ndarray
    workspace: WorkspaceField
    W: Octree
    Q: Octree
    S: RegionSet
    aspects: RegionSet
    aspect_labels: np.ndarray
    Sc: list
    sc_masks: list
    basic_regions: RegionSet
    region_labels: np.ndarray
    region_attrs: dict
    images: ComponentImages
    jaccard: np.ndarray
    coincidence: list
    uniqueness_domains: RegionSet
    domain_labels: np.ndarray
    adjacency: np.ndarray
    multiplicity: RegionSet
    lookup: RegionLookup
    domain_lookup: RegionLookup
    faults: Faults
    timings: dict = field(default_factory=dict)

    @property
    def basic_components(self) -> list:
        return [self.images.tree(r) for r in range(len(self.images.voxels))]

    def summary(self) -> dict:
        jvol = self.joint.components().region_volumes()
        return {
            "max_depth": self.config.max_depth,
            "joint_depth": self.config.jdepth,
            "aspects": self.aspects.region_count,
            "aspect_signs": self.aspects.attrs.get("sign", []),
            "characteristic_surfaces": len(self.Sc),
            "joint_components": [{"multiplicity": m, "volume": round(float(v), 6)}
                                 for m, v in zip(self.joint.multiplicity, jvol)],
            "basic_regions": self.basic_regions.region_count,
            "basic_regions_per_aspect": np.bincount(
                np.asarray(self.region_attrs["aspect"], int),
                minlength=self.aspects.region_count).tolist(),
            "basic_region_components": self.region_attrs["component"],
            "basic_region_pieces": self.region_attrs["pieces"],
            "sheets": self.atlas.sheet_count,
            "sheet_components": self.atlas.sheet_component.tolist(),
            "sheet_stats": self.atlas.stats,
            "coincidence_class_sizes": sorted(len(c) for c in self.coincidence),
            "coincidence_classes": self.coincidence,
            "uniqueness_domains": self.uniqueness_domains.region_count,
            "uniqueness_domain_regions": self.uniqueness_domains.attrs["regions"],
            "multiplicities": self.multiplicity.attrs["multiplicity"],
            "volumes": {"W": round(self.W.volume(), 6), "Q": round(self.Q.volume(), 6),
                        "basic_regions": [round(float(v), 6) for v in
                                          self.basic_regions.region_volumes()]},
            "image_subsamples": list(self.images.subsamples),
            "workspace_stats": self.workspace.stats,
            "joint_stats": self.joint.stats,
            "faults": list(self.faults),
        }

    def region_of(self, poses, radius=None):
        """Basic region ids of poses (strict grid, then local fallback)."""
        return attribute_points(self.geometry, self.lookup, self.joint, poses, radius,
                                self.atlas, self.sheet_region)

    def multiplicity_at(self, rho) -> np.ndarray:
        lab = self.multiplicity.label_at(np.atleast_2d(rho))
        vals = np.asarray(self.multiplicity.attrs["multiplicity"])
        return np.where(lab >= 0, vals[np.maximum(lab, 0)], 0)

    def class_of_region(self) -> np.ndarray:
        out = np.zeros(self.basic_regions.region_count, np.int64)
        for k, c in enumerate(self.coincidence):
            out[c] = k
        return out

    def class_size_of_region(self) -> np.ndarray:
        out = np.zeros(self.basic_regions.region_count, np.int64)
        for c in self.coincidence:
            out[c] = len(c)
        return out

    def components_at(self, rho) -> list:
        """Basic components whose image holds each joint vector."""
        rho = np.atleast_2d(rho)
        if not self.images.voxels:
            return [[] for _ in rho]
        hits = np.stack([self.images.contains(r, rho) for r in range(len(self.images.voxels))],
                        axis=1)
        return [np.flatnonzero(h).tolist() for h in hits]


def analyze(g, cfg: AnalysisConfig | None = None) -> AnalysisBundle:
    """Run the full pipeline and return the bundle of all sets."""
    cfg = cfg or AnalysisConfig()
    faults = Faults()
    timings = {}
    t0 = time.perf_counter()

    def mark(name):
        nonlocal t0
        now = time.perf_counter()
        timings[name] = round(now - t0, 3)
        t0 = now

    jp = sample_joint_space(g, cfg, faults)
    Q = jp.tree()
    mark("joint_space")
    atlas = build_sheets(g, jp, cfg, faults)
    mark("sheets")
    wf = sample_workspace(g, cfg, atlas)
    W = wf.tree(wf.in_w)
    mark("workspace")
    aspects, aspect_labels, absorbed = build_aspects(wf, faults, cfg.min_region_cells)
    wf.singular |= absorbed
    S = build_singular_surface(wf)
    if aspects.region_count != 2:
        faults.add("aspects", f"found {aspects.region_count} aspects")
    mark("aspects")
    sc_masks = [characteristic_mask(wf, aspect_labels, a) for a in range(aspects.region_count)]
    br_labels, br_count, br_attrs, sheet_region = build_basic_regions(
        wf, atlas, jp, aspect_labels, aspects.attrs["sign"], sc_masks, faults,
        cfg.min_region_cells)
    sc_list = []
    for a in range(aspects.region_count):
        sc_masks[a] = sc_masks[a] | ((aspect_labels == a) & (br_labels < 0))
        lab, _ = _components(wf, sc_masks[a])
        sc_list.append(RegionSet.from_leaf_labels(wf.bounds, wf.depth, wf.leaves, lab,
                                                  "characteristic_surface",
                                                  WORKSPACE_PERIODIC, {"aspect": a}))
    basic = RegionSet.from_leaf_labels(wf.bounds, wf.depth, wf.leaves, br_labels,
                                       "basic_region", WORKSPACE_PERIODIC, br_attrs)
    lookup = RegionLookup(wf, br_labels, br_attrs["sign"], br_attrs["component"],
                          cfg.lookup_radius)
    mark("basic_regions")

    def attribute(pts):
        # samples imaged onto the jump locus stay out; the closing covers it
        lab = attribute_points(g, lookup, jp, pts, None, atlas, sheet_region)
        lab[jp.component_at(mk.ik_array(g, pts)) < 0] = -1
        return lab

    images = build_basic_components(g, wf, br_count, cfg, attribute)
    jac = jaccard_matrix(images)
    classes, _ = coincidence_classes(jac, cfg, faults)
    mult = multiplicity_map(images)
    mark("basic_components")
    ud, ud_labels, adjacency = build_uniqueness_domains(wf, br_labels, br_attrs, sc_masks,
                                                        jac, cfg, faults)
    dom_sign = [aspects.attrs["sign"][a] for a in ud.attrs["aspect"]]
    domain_lookup = RegionLookup(wf, ud_labels, dom_sign, [-1] * ud.region_count, 0)
    mark("uniqueness_domains")
    return AnalysisBundle(g, cfg, jp, atlas, sheet_region, wf, W, Q, S, aspects, aspect_labels,
                          sc_list, sc_masks, basic, br_labels, br_attrs, images, jac, classes, ud, ud_labels,
                          adjacency, mult, lookup, domain_lookup, faults, timings)


# ------------------------------------------------------ empirical checks --

def sample_component(bundle: AnalysisBundle, regions, n: int, rng):
    """Uniform joint-space samples from the union of some component images."""
    vox = [bundle.images.voxels[r] for r in np.atleast_1d(regions)]
    vox = np.unique(np.concatenate(vox)) if vox else np.zeros(0, np.int64)
    if len(vox) == 0 or n == 0:
        return np.zeros((0, 3))
    pick = vox[rng.integers(0, len(vox), n)]
    side = 1 << bundle.images.depth
    ijk = np.column_stack(np.unravel_index(pick, (side,) * 3))
    h = bundle.images.bounds.cell_size(bundle.images.depth)
    return np.asarray(bundle.images.bounds.lo) + (ijk + rng.random((n, 3))) * h


def _near_image_boundary(images: ComponentImages, r, rho):
    """True where ``rho`` is within one joint voxel of the image boundary."""
    bnd = ot.voxel_boundary(images.mask(r), JOINT_PERIODIC)
    bnd = ndimage.binary_dilation(bnd, ndimage.generate_binary_structure(3, 3))
    ijk, ok = ot.voxel_index(images.bounds, images.depth, JOINT_PERIODIC, rho)
    return ~ok | bnd[ijk[:, 0], ijk[:, 1], ijk[:, 2]]


def check_unique_solution(bundle: AnalysisBundle, samples=100, seed=None):
    """Per basic region: image samples with exactly one mode inside the region.

    Modes on unlabeled surface voxels go to the nearest compatible region
    within one voxel.  A failure counts as near a boundary when the sample
    sits within one joint voxel of the image boundary or one of its modes
    sits within one workspace voxel of an unlabeled voxel.
    """
    rng = np.random.default_rng(bundle.config.seed if seed is None else seed)
    g = bundle.geometry
    results = []
    for r in range(bundle.basic_regions.region_count):
        q = sample_component(bundle, r, samples, rng)
        if len(q) == 0:
            results.append({"region": r, "samples": 0, "passed": 0, "failures": 0,
                            "near_boundary": 0})
            continue
        fk = mk.fk_batch(g, q, bundle.config.fk_samples)
        lab = locate_solutions(g, bundle.lookup, bundle.joint, q, fk, radius=1)
        ok = np.sum(lab == r, axis=1) == 1
        near = np.zeros(len(q), bool)
        bad = np.flatnonzero(~ok)
        if len(bad):
            near[bad] = _near_image_boundary(bundle.images, r, q[bad])
            for i in bad:
                P = fk.poses[i, :fk.count[i]]
                if len(P) and not near[i]:
                    near[i] = bool(np.any(bundle.lookup.near_boundary(P, 1)))
        results.append({"region": r, "samples": len(q), "passed": int(ok.sum()),
                        "failures": int((~ok).sum()), "near_boundary": int(near[~ok].sum())})
    return results


def check_uniqueness_domains(bundle: AnalysisBundle, samples=100, seed=None):
    """Per domain: image samples with at most one mode inside the domain."""
    rng = np.random.default_rng(bundle.config.seed if seed is None else seed)
    g = bundle.geometry
    out = []
    for k, regions in enumerate(bundle.uniqueness_domains.attrs["regions"]):
        q = sample_component(bundle, regions, samples, rng)
        if len(q) == 0:
            out.append({"domain": k, "samples": 0, "passed": 0})
            continue
        fk = mk.fk_batch(g, q, bundle.config.fk_samples)
        valid = np.arange(fk.det_a.shape[1])[None, :] < fk.count[:, None]
        lab = np.full(fk.det_a.shape, -1)
        lab[valid] = bundle.domain_lookup.strict(fk.poses[valid])
        inside = np.sum(lab == k, axis=1)
        out.append({"domain": k, "samples": len(q), "passed": int(np.sum(inside <= 1))})
    return out


def check_characteristic_scan(bundle: AnalysisBundle, per_aspect=2000, seed=None):
    """Literal scan of the aspect boundaries through the joint space.

    Boundary samples X (on S or on the outer boundary of W, next to the
    aspect) are mapped to ``q = g(X)``; every FK mode of ``q`` that falls in
    the aspect must lie within one voxel of a characteristic-surface cell or
    of the aspect boundary itself.
    """
    rng = np.random.default_rng(bundle.config.seed if seed is None else seed)
    wf = bundle.workspace
    g = bundle.geometry
    sc_any = np.logical_or.reduce(bundle.sc_masks, axis=0)
    grid_sc = sc_any[wf.leaf_index]
    in_w = wf.in_w[wf.leaf_index]
    grid_bnd = wf.singular[wf.leaf_index] | ot.voxel_boundary(in_w, WORKSPACE_PERIODIC) | ~in_w
    n = grid_sc.shape[0]
    offs = np.array(list(itertools.product((-1, 0, 1), repeat=3)))
    cs = wf.bounds.cell_size(wf.depth)
    out = []
    for a in range(bundle.aspects.region_count):
        aspect_vox = (bundle.aspect_labels == a)[wf.leaf_index]
        near = np.zeros_like(aspect_vox)
        for axis in range(3):
            for s in (1, -1):
                near |= np.roll(aspect_vox, s, axis=axis)
        bvox = (near & wf.singular[wf.leaf_index]) | (aspect_vox & grid_bnd)
        idx = np.argwhere(bvox)
        if len(idx) == 0:
            out.append({"aspect": a, "modes": 0, "ok": 0})
            continue
        pick = idx[rng.choice(len(idx), size=min(per_aspect, len(idx)), replace=False)]
        X = np.asarray(wf.bounds.lo) + (pick + rng.random(pick.shape)) * cs
        rho = mk.ik_array(g, X)
        rho = rho[mk.limits_mask(g, rho)]
        fk = mk.fk_batch(g, rho, bundle.config.fk_samples)
        valid = np.arange(fk.det_a.shape[1])[None, :] < fk.count[:, None]
        ijk, ok = ot.voxel_index(wf.bounds, wf.depth, WORKSPACE_PERIODIC, fk.poses[valid])
        c = ijk[ok][:, None, :] + offs[None]
        c[..., 2] %= n
        c = np.clip(c, 0, n - 1)
        touch = aspect_vox[c[..., 0], c[..., 1], c[..., 2]].any(axis=1)
        good = (grid_sc[c[..., 0], c[..., 1], c[..., 2]]
                | grid_bnd[c[..., 0], c[..., 1], c[..., 2]]).any(axis=1)
        out.append({"aspect": a, "modes": int(touch.sum()), "ok": int((touch & good).sum())})
    return out
