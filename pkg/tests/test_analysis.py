import dataclasses
import json
import math

import numpy as np
import pytest
from scipy import ndimage

from conftest import Q_REF, TABLE1, match_rows
from rpr3 import analysis as an
from rpr3 import manipulator as mk
from rpr3 import octree as ot
from test_manipulator import concurrent_pose

# 10**6-point Monte-Carlo estimate of vol{X in [-33,33]^2 x [-pi,pi) : g(X) in [10,32]^3},
# seed 12345, computed with an independent numpy IK and frozen here
W_VOLUME_MC = 5277.73
# concurrency points and phi brackets whose poses lie inside the joint limits
CONCURRENT = [((5.0, 5.0), (-2.6, -2.4)), ((-4.0, 6.0), (-1.0, -0.8)),
              ((4.0, 4.0), (-2.7, -2.5)), ((3.0, 8.0), (-2.45, -2.3)),
              ((2.0, 3.0), (-2.7, -2.6)), ((12.0, 2.0), (0.6, 0.7))]


def voxels(wf, leaf_values):
    return np.asarray(leaf_values)[wf.leaf_index]


def face_neighbours(mask, periodic=an.WORKSPACE_PERIODIC, outside=False):
    """Voxels with a face neighbour in ``mask`` (``outside`` fills the box exterior)."""
    out = np.zeros(mask.shape, bool)
    for ax in range(3):
        for s in (1, -1):
            nb = np.roll(mask, s, axis=ax)
            if not periodic[ax]:
                edge = [slice(None)] * 3
                edge[ax] = 0 if s == 1 else -1
                nb[tuple(edge)] = outside
            out |= nb
    return out


# ------------------------------------------------------------ config --

def test_config_validation():
    with pytest.raises(ValueError):
        an.AnalysisConfig(samples_per_cell=5)
    with pytest.raises(ValueError):
        an.AnalysisConfig(coincident_jaccard=0.04)
    with pytest.raises(ValueError):
        an.AnalysisConfig(max_depth=11)
    with pytest.raises(ValueError):
        an.AnalysisConfig(det_threshold=0)


# --------------------------------------------------------- workspace --

def test_workspace_membership(bundle6):
    assert bundle6.W.contains([[-8.715, 12.183, -0.987]])[0]
    assert not bundle6.W.contains([[0.0, 0.0, 0.0]])[0]


def test_workspace_volume_against_monte_carlo(bundle7):
    assert abs(bundle7.W.volume() - W_VOLUME_MC) <= 0.05 * W_VOLUME_MC


def test_workspace_volume_brackets_monte_carlo(bundle7):
    wf = bundle7.workspace
    inw9, _, _ = an._decode(wf.field.sample_codes())
    vol = wf.leaves.volumes(wf.bounds)
    inner = vol[inw9.all(axis=1)].sum()
    assert inner < W_VOLUME_MC < bundle7.W.volume()


def test_standalone_workspace_build_within_pipeline(bundle6):
    # the pipeline refines more cells near det A = 0, so it can only add cells
    W = an.build_workspace(bundle6.geometry, bundle6.config)
    pts = np.random.default_rng(4).uniform([-33, -33, -math.pi], [33, 33, math.pi],
                                           (20000, 3))
    inside = W.contains(pts)
    assert inside.any()
    assert np.all(bundle6.W.contains(pts)[inside])


# ------------------------------------------------------- joint space --

def test_joint_space_contents(bundle6):
    Q = bundle6.Q
    assert Q.contains([Q_REF])[0]
    assert Q.volume() < 22.0 ** 3
    assert not Q.contains([[32.0, 10.0, 10.0]])[0]


def test_joint_space_covers_image_of_workspace(bundle6, geom):
    rng = np.random.default_rng(8)
    P = rng.uniform([-33, -33, -math.pi], [33, 33, math.pi], (200000, 3))
    q = mk.ik_array(geom, P)
    q = q[mk.limits_mask(geom, q)][:10000]
    assert len(q) == 10000
    assert bundle6.Q.contains(q).all()


def test_standalone_joint_space_build(geom):
    cfg = an.AnalysisConfig(max_depth=4)
    Q = an.build_joint_space(geom, cfg)
    assert Q.contains([Q_REF])[0]
    assert Q.volume() < 22.0 ** 3


# --------------------------------------------------------- singular --

@pytest.mark.parametrize("P, bracket", CONCURRENT)
def test_concurrent_configurations_marked_singular(bundle6, geom, P, bracket):
    X = concurrent_pose(geom, np.array(P), bracket)
    assert abs(mk.det_a(geom, X)) <= 1e-8
    assert mk.limits_mask(geom, mk.ik_array(geom, X[None]))[0]
    assert bundle6.S.labeled.contains([X])[0]


def test_singular_cells_are_face_adjacent_to_both_aspects(bundle6):
    wf = bundle6.workspace
    s = voxels(wf, wf.singular)
    a = voxels(wf, bundle6.aspect_labels)
    outside = ~voxels(wf, wf.in_w)
    ok = (face_neighbours(a == 0) & face_neighbours(a == 1)) | face_neighbours(outside, outside=True)
    assert np.all(ok[s]), f"{int((ok & s).sum())} of {int(s.sum())} S voxels"


def test_singular_components_separate_the_aspects(bundle6):
    wf = bundle6.workspace
    s = voxels(wf, wf.singular)
    a = voxels(wf, bundle6.aspect_labels)
    outside = ~voxels(wf, wf.in_w)
    lab, n = ot.label_voxels(s, an.WORKSPACE_PERIODIC)
    assert n >= 1
    touch = [face_neighbours(a == 0), face_neighbours(a == 1),
             face_neighbours(outside, outside=True)]
    for k in range(1, n + 1):
        comp = lab == k
        t0, t1, tb = (bool(np.any(t[comp])) for t in touch)
        assert (t0 and t1) or tb


# ----------------------------------------------------------- aspects --

def test_two_aspects_with_opposite_signs(bundle6):
    assert bundle6.aspects.region_count == 2
    assert sorted(bundle6.aspects.attrs["sign"]) == [-1, 1]


def test_reference_rows_share_an_aspect(bundle6, geom):
    sols = np.array([p.as_array() for p in mk.forward_kinematics(geom, mk.JointVector(Q_REF))])
    _, idx = match_rows(sols, TABLE1)
    lab = bundle6.aspects.label_at(sols[idx])
    assert lab[1] == lab[2] == lab[5] >= 0
    assert len(set(lab.tolist())) == 2


def test_partition_of_workspace(bundle6):
    wf = bundle6.workspace
    asp = bundle6.aspect_labels >= 0
    assert np.array_equal(asp | wf.singular, wf.in_w)
    assert not np.any(asp & wf.singular)


def test_sign_purity(bundle6, geom):
    wf = bundle6.workspace
    centres = wf.leaves.centers(wf.bounds)
    for a, sign in enumerate(bundle6.aspects.attrs["sign"]):
        m = bundle6.aspect_labels == a
        assert np.all(np.sign(mk.det_a(geom, centres[m])) == sign)


def test_empty_singular_set_gives_one_aspect(bundle6):
    wf = bundle6.workspace
    no_s = dataclasses.replace(wf, singular=np.zeros_like(wf.singular))
    aspects, _, _ = an.build_aspects(no_s, an.Faults())
    assert aspects.region_count == 1


def test_monotone_refinement(bundle5, bundle6):
    assert bundle5.aspects.region_count == bundle6.aspects.region_count == 2
    assert sorted(bundle5.aspects.attrs["sign"]) == sorted(bundle6.aspects.attrs["sign"])
    pts = np.array([[-14.896, 1.583, 0.245], [-8.727, 12.176, -0.987]])
    s5 = np.asarray(bundle5.aspects.attrs["sign"])[bundle5.aspects.label_at(pts)]
    s6 = np.asarray(bundle6.aspects.attrs["sign"])[bundle6.aspects.label_at(pts)]
    assert np.array_equal(s5, s6)


# ------------------------------------------- characteristic surfaces --

def test_one_characteristic_surface_per_aspect(bundle6):
    assert len(bundle6.Sc) == bundle6.aspects.region_count
    wf = bundle6.workspace
    for a, m in enumerate(bundle6.sc_masks):
        assert not np.any(m & (bundle6.aspect_labels != a))
        assert not np.any(m & wf.singular)


def test_characteristic_scan_closure(bundle6):
    for r in an.check_characteristic_scan(bundle6, 2000):
        assert r["modes"] > 0
        assert r["ok"] == r["modes"], r


# ------------------------------------------------------ basic regions --

def test_basic_regions_inside_one_aspect(bundle6):
    labels = bundle6.region_labels
    for r in range(bundle6.basic_regions.region_count):
        assert len(np.unique(bundle6.aspect_labels[labels == r])) == 1


def test_partition_of_each_aspect(bundle6):
    br = bundle6.region_labels >= 0
    for a, sc in enumerate(bundle6.sc_masks):
        wa = bundle6.aspect_labels == a
        assert np.array_equal((br & wa) | sc, wa)
        assert not np.any(br & sc)


def test_region_ids_dense_and_deterministic(bundle4, geom):
    again = an.analyze(geom, an.AnalysisConfig(max_depth=4))
    assert json.dumps(again.summary(), sort_keys=True) == json.dumps(bundle4.summary(),
                                                                    sort_keys=True)
    for name in ("aspects", "basic_regions", "uniqueness_domains", "S"):
        assert ot.serialize_regions(getattr(again, name)) == \
            ot.serialize_regions(getattr(bundle4, name))
    n = bundle4.basic_regions.region_count
    assert set(np.unique(bundle4.basic_regions.labels)) == set(range(n))


# --------------------------------------------------- basic components --

def test_component_self_jaccard(bundle6):
    assert np.allclose(np.diag(bundle6.jaccard), 1.0)
    assert np.allclose(bundle6.jaccard, bundle6.jaccard.T)


def test_intermediate_pairs_are_reported(bundle6):
    cfg = bundle6.config
    jac = bundle6.jaccard
    faults = {tuple(f["pair"]) for f in bundle6.faults if "pair" in f}
    n = len(jac)
    for i in range(n):
        for j in range(i + 1, n):
            if cfg.disjoint_jaccard < jac[i, j] < cfg.coincident_jaccard:
                assert (i, j) in faults


def test_coincidence_classes_partition_regions(bundle6):
    ids = sorted(r for c in bundle6.coincidence for r in c)
    assert ids == list(range(bundle6.basic_regions.region_count))


def _away_from_label_change(rs, q, depth, box):
    ijk, ok = ot.voxel_index(box, depth, an.JOINT_PERIODIC, q)
    lab = rs.labeled.to_dense().astype(np.int64)
    grown = ndimage.grey_dilation(lab, size=(3, 3, 3))
    shrunk = ndimage.grey_erosion(lab, size=(3, 3, 3), mode="constant", cval=-1)
    flat = grown == shrunk
    return ok & flat[ijk[:, 0], ijk[:, 1], ijk[:, 2]]


def test_multiplicity_matches_fk_count(bundle7, geom):
    mult = bundle7.multiplicity
    jb = bundle7.config.joint_bounds(geom)
    rng = np.random.default_rng(21)
    q = rng.uniform(jb.lo, jb.hi, (4000, 3))
    keep = _away_from_label_change(mult, q, bundle7.images.depth, jb)
    q = q[keep][:200]
    assert len(q) == 200
    counts = mk.fk_batch(geom, q).count
    assert np.array_equal(bundle7.multiplicity_at(q), counts)


def test_multiplicity_reference_and_outside(bundle6):
    assert bundle6.multiplicity_at([Q_REF])[0] == 6
    assert bundle6.multiplicity_at([[32.0, 10.0, 10.0]])[0] == 0
    assert bundle6.multiplicity_at([[100.0, 10.0, 10.0]])[0] == 0


def test_class_size_matches_fk_count(bundle7, geom):
    rng = np.random.default_rng(2)
    sizes = bundle7.class_size_of_region()
    mult = bundle7.multiplicity
    jb = bundle7.config.joint_bounds(geom)
    for r in range(bundle7.basic_regions.region_count):
        q = an.sample_component(bundle7, r, 400, rng)
        q = q[_away_from_label_change(mult, q, bundle7.images.depth, jb)]
        q = q[~an._near_image_boundary(bundle7.images, r, q)][:50]
        if len(q) == 0:
            continue
        counts = mk.fk_batch(geom, q).count
        share = np.mean(counts == sizes[r])
        assert share >= 0.95, (r, sizes[r], np.bincount(counts))


# ------------------------------------------------- uniqueness domains --

def test_uniqueness_domain_lower_bound(bundle5, bundle6):
    for b in (bundle5, bundle6):
        assert b.uniqueness_domains.region_count >= 6


def test_uniqueness_domains_hold_at_most_one_solution(bundle6):
    for r in an.check_uniqueness_domains(bundle6, 100):
        assert r["samples"] == 100
        assert r["passed"] == r["samples"], r


def test_uniqueness_domains_cover_regions_once(bundle6):
    regions = [r for d in bundle6.uniqueness_domains.attrs["regions"] for r in d]
    assert sorted(regions) == list(range(bundle6.basic_regions.region_count))
    for d in bundle6.uniqueness_domains.attrs["regions"]:
        asp = {bundle6.region_attrs["aspect"][r] for r in d}
        assert len(asp) == 1
        for i in d:
            for j in d:
                if i < j:
                    assert bundle6.jaccard[i, j] <= bundle6.config.disjoint_jaccard


def test_partition_search_is_minimal():
    # path graph 0-1-2-3 with conflicts 0-2 and 1-3 needs two groups
    conflict = np.zeros((4, 4), bool)
    conflict[0, 2] = conflict[2, 0] = conflict[1, 3] = conflict[3, 1] = True
    adj = np.zeros((4, 4), bool)
    for i in range(3):
        adj[i, i + 1] = adj[i + 1, i] = True
    groups, exact = an.partition_regions([0, 1, 2, 3], conflict, adj)
    assert exact
    assert len(groups) == 2
    assert sorted(r for g in groups for r in g) == [0, 1, 2, 3]
