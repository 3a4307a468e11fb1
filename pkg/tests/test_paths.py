import json
import math

import numpy as np
import pytest
from hypothesis import HealthCheck, assume, given, settings
from hypothesis import strategies as st

from conftest import Q_REF, TABLE1, match_rows
from rpr3 import manipulator as mk
from rpr3 import paths as pt
from rpr3.manipulator import ManipulatorGeometry, Pose
from test_manipulator import concurrent_pose

GEOM = ManipulatorGeometry.reference()


def reference_solutions():
    return np.array([p.as_array() for p in mk.forward_kinematics(GEOM, mk.JointVector(Q_REF))])


def bridge_path(n=41):
    """Pose-space segment through a concurrent pose, mapped to joint space."""
    Xs = concurrent_pose(GEOM, np.array([5.0, 5.0]), (-2.6, -2.4))
    s = np.linspace(-1.0, 1.0, n)
    X = Xs + s[:, None] * np.array([0.0, 0.0, 0.05])
    return pt.JointPath(tuple(map(tuple, mk.ik_array(GEOM, X))), 0.05), X


def random_workspace_pose(rng):
    while True:
        X = rng.uniform([-30, -30, -math.pi], [30, 30, math.pi])
        if mk.limits_mask(GEOM, mk.ik_array(GEOM, X[None]))[0] and abs(mk.det_a(GEOM, X)) > 1e3:
            return X


# ---------------------------------------------------------- JointPath --

def test_joint_path_validation():
    with pytest.raises(pt.PathError):
        pt.JointPath(((15.0, 15.0, 15.0),))
    with pytest.raises(pt.PathError):
        pt.JointPath(((15.0, 15.0, 15.0), (16.0, 15.0, 15.0)), step=0)
    jp = pt.JointPath(((15.0, 15.0, 15.0), (40.0, 15.0, 15.0)))
    with pytest.raises(pt.PathError):
        jp.check_limits(GEOM)


def test_joint_path_interpolation():
    jp = pt.JointPath(((10.0, 10.0, 10.0), (13.0, 14.0, 10.0), (13.0, 14.0, 12.0)))
    assert jp.length == pytest.approx(7.0)
    assert np.allclose(jp.at(2.5), [11.5, 12.0, 10.0])
    assert np.allclose(jp.at(6.0), [13.0, 14.0, 11.0])
    assert np.allclose(jp.at(99.0), [13.0, 14.0, 12.0])
    assert not jp.closed
    assert np.allclose(jp.reversed().at(0.0), [13.0, 14.0, 12.0])


# -------------------------------------------------------- continuation --

def test_constant_path():
    X = reference_solutions()[0]
    jp = pt.JointPath((Q_REF, Q_REF))
    rep = pt.continue_path(GEOM, jp, Pose(*X))
    assert rep.ok
    assert np.allclose(rep.poses, X, atol=1e-12)
    assert rep.sign_changes == []
    assert not rep.mode_changed


def test_start_off_fiber_rejected():
    X = reference_solutions()[0] + np.array([0.01, 0.0, 0.0])
    with pytest.raises(pt.PathError):
        pt.continue_path(GEOM, pt.JointPath((Q_REF, (15.0, 15.0, 12.0))), Pose(*X))


def test_fixture_changes_assembly_mode():
    meta = pt.fixture_meta()
    jp = pt.read_path_csv(pt.fixture_path(), meta["step"])
    assert jp.closed
    assert np.allclose(jp.waypoints[0], Q_REF)
    sols = reference_solutions()
    _, idx = match_rows(sols, TABLE1)
    rep = pt.continue_path(GEOM, jp, Pose(*sols[idx[meta["start_table_row"] - 1]]))
    assert rep.ok and rep.mode_changed
    assert rep.sign_changes == []
    assert rep.min_abs_det >= 10 * pt.SINGULAR_DET
    end = rep.poses[-1]
    assert np.allclose(end, sols[idx[meta["end_table_row"] - 1]], atol=1e-6)
    assert np.allclose(end, meta["end_pose"], atol=1e-9)


def test_fixture_reversal_returns_to_start():
    meta = pt.fixture_meta()
    jp = pt.read_path_csv(pt.fixture_path(), meta["step"])
    rep = pt.continue_path(GEOM, jp, Pose(*meta["start_pose"]))
    back = pt.continue_path(GEOM, jp.reversed(), rep.end)
    assert back.ok
    assert np.max(pt._jump(back.poses[-1], rep.poses[0])) <= 1e-6


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.1, 3.0))
def test_continuation_invariants(seed, length):
    rng = np.random.default_rng(seed)
    X0 = random_workspace_pose(rng)
    q0 = mk.ik_array(GEOM, X0)
    d = rng.normal(size=3)
    q1 = q0 + length * d / np.linalg.norm(d)
    assume(np.all(mk.limits_mask(GEOM, q1[None])))
    jp = pt.JointPath((tuple(q0), tuple(q1)), 0.05)
    rep = pt.continue_path(GEOM, jp, Pose(*X0))
    res = np.abs(pt._residual(GEOM, rep.poses, rep.joints))
    assert res.max() <= 1e-8
    jumps = np.array([pt._jump(a, b) for a, b in zip(rep.poses[1:], rep.poses[:-1])])
    if len(jumps):
        assert np.all(jumps < np.asarray(pt.DEFAULT_LEAF))
    if rep.ok and not rep.sign_changes:
        back = pt.continue_path(GEOM, jp.reversed(), rep.end)
        if back.ok:
            assert np.max(pt._jump(back.poses[-1], X0)) <= 1e-6


def test_failure_reports_location():
    # a pose-space line across S in y maps onto a fold of the FK map
    Xs = concurrent_pose(GEOM, np.array([5.0, 5.0]), (-2.6, -2.4))
    X = Xs + np.linspace(-1, 1, 41)[:, None] * np.array([0.0, 1.0, 0.0])
    jp = pt.JointPath(tuple(map(tuple, mk.ik_array(GEOM, X))), 0.05)
    rep = pt.continue_path(GEOM, jp, Pose(*X[0]))
    assert not rep.ok
    assert 0.0 < rep.failed_at <= jp.length
    assert rep.message
    assert not rep.mode_changed
    assert rep.to_dict()["failed_at"] == rep.failed_at


# ------------------------------------------------------ crossing S ----

def test_bridge_path_changes_sign(bundle6):
    jp, X = bridge_path()
    rep = pt.continue_path(GEOM, jp, Pose(*X[0]))
    assert rep.ok
    assert len(rep.sign_changes) >= 1
    assert np.allclose(rep.poses[-1], X[-1], atol=1e-6)
    for t in rep.sign_changes:
        i = int(np.searchsorted(rep.params, t))
        assert bundle6.S.labeled.contains(rep.poses[[i - 1, i]]).any()


@pytest.mark.parametrize("P, bracket, axis, scale", [
    ((5.0, 5.0), (-2.6, -2.4), 1, 1.0), ((5.0, 5.0), (-2.6, -2.4), 0, 1.0),
    ((4.0, 4.0), (-2.7, -2.5), 1, 1.0), ((4.0, 4.0), (-2.7, -2.5), 2, 0.05)])
def test_sign_changes_cross_marked_cells(bundle6, P, bracket, axis, scale):
    Xs = concurrent_pose(GEOM, np.array(P), bracket)
    d = np.zeros(3)
    d[axis] = scale
    X = Xs + np.linspace(-1, 1, 41)[:, None] * d
    jp = pt.JointPath(tuple(map(tuple, mk.ik_array(GEOM, X))), 0.05)
    rep = pt.continue_path(GEOM, jp, Pose(*X[0]))
    assert rep.sign_changes
    for t in rep.sign_changes:
        i = int(np.searchsorted(rep.params, t))
        assert bundle6.S.labeled.contains(rep.poses[[i - 1, i]]).any()


# ------------------------------------------------------ classification --

def _fixture_report():
    meta = pt.fixture_meta()
    jp = pt.read_path_csv(pt.fixture_path(), meta["step"])
    return pt.continue_path(GEOM, jp, Pose(*meta["start_pose"]))


def test_fixture_enters_two_solution_class(bundle7):
    rep = _fixture_report()
    cls = pt.classify_mode_change(rep, bundle7)
    assert cls.nonsingular_mode_change
    assert cls.enters_size_two
    assert cls.necessary_condition_holds
    assert cls.impossible_transitions == []
    assert rep.start_region != rep.end_region
    assert rep.start_region >= 0 and rep.end_region >= 0


def test_trace_inside_one_region(bundle7):
    X = reference_solutions()[0]
    q0 = np.array(Q_REF)
    jp = pt.JointPath((tuple(q0), tuple(q0 + [0.05, -0.05, 0.05]), tuple(q0)), 0.01)
    rep = pt.continue_path(GEOM, jp, Pose(*X))
    cls = pt.classify_mode_change(rep, bundle7)
    assert len(cls.sequence) == 1
    assert not rep.mode_changed
    assert not cls.nonsingular_mode_change
    assert rep.start_region == rep.end_region


def _synthetic_report(poses):
    poses = np.asarray(poses, float)
    return pt.PathReport(np.arange(len(poses), dtype=float), poses, mk.ik_array(GEOM, poses),
                         mk.det_a(GEOM, poses), [], False, False)


def test_direct_step_between_six_solution_regions_flagged(bundle7):
    sizes = bundle7.class_size_of_region()
    six = [c for c in bundle7.coincidence if len(c) == 6][0]
    wf = bundle7.workspace
    centres = wf.leaves.centers(wf.bounds)
    poses = []
    for r in six[:2]:
        cand = centres[bundle7.region_labels == r]
        lab = bundle7.region_of(cand)
        poses.append(cand[np.flatnonzero(lab == r)[0]])
    cls = pt.classify_mode_change(_synthetic_report(poses), bundle7)
    assert cls.sequence == six[:2]
    assert cls.impossible_transitions == [six[:2]]
    assert all(sizes[r] == 6 for r in six[:2])


def test_classification_rejects_traces_outside_boxes(bundle7):
    with pytest.raises(pt.PathError):
        pt.classify_mode_change(_synthetic_report([[40.0, 0.0, 0.0], [0.0, 0.0, 0.0]]), bundle7)
    rep = _synthetic_report([[-8.715, 12.183, -0.987], [-8.715, 12.183, -0.987]])
    rep.joints = np.array([[14.98, 15.38, 12.0], [35.0, 15.0, 12.0]])
    with pytest.raises(pt.PathError):
        pt.classify_mode_change(rep, bundle7)


# ------------------------------------------------------------------ io --

def test_csv_roundtrip(tmp_path):
    jp = pt.JointPath(((14.98, 15.38, 12.0), (1 / 3 + 15, 16.0, 13.0)), 0.02)
    f = tmp_path / "p.csv"
    pt.write_path_csv(f, jp)
    assert pt.read_path_csv(f, 0.02) == jp


def test_csv_errors(tmp_path):
    f = tmp_path / "bad.csv"
    f.write_text("rho1,rho2,rho3\n15,15,15\n15,x,15\n")
    with pytest.raises(pt.PathError):
        pt.read_path_csv(f)
    f.write_text("# comment\n15,15,15\n")
    with pytest.raises(pt.PathError):
        pt.read_path_csv(f)


def test_report_json(tmp_path):
    rep = _fixture_report()
    f = tmp_path / "r.json"
    pt.write_report_json(f, rep)
    doc = json.loads(f.read_text())
    assert doc["mode_changed"] is True
    assert doc["sign_change_count"] == 0
    assert len(doc["trace"]) == len(rep.params)
    assert doc["min_abs_det_a"] == pytest.approx(rep.min_abs_det)
