import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_transform
from egopoint.errors import DegenerateHand
from egopoint.geometry import RigidTransform, invert
from egopoint.hand_action import (
    CLOSED,
    FRAME_REPLACEMENT,
    INDEX_MCP,
    INDEX_TIP,
    LITERAL,
    MIDDLE_MCP,
    OPEN,
    THUMB_CMC,
    THUMB_TIP,
    WRIST,
    FrameRecord,
    UnifiedAction,
    check_keypoints,
    correct_hand,
    detect_grasp,
    extract_action,
    grasp_labels,
    palm_frame,
)
from egopoint.simulator import OPEN_GAP, PINCH_GAP, hand_keypoints_local

seeds = st.integers(0, 2**32 - 1)


def flat_hand():
    h = np.zeros((21, 3))
    rng = np.random.default_rng(0)
    h[:] = rng.uniform(-0.02, 0.02, (21, 3)) + [0.05, 0.0, 0.0]
    h[WRIST] = [0.0, 0.0, 0.0]
    h[MIDDLE_MCP] = [0.09, 0.0, 0.0]
    h[INDEX_MCP] = [0.085, 0.025, 0.0]
    h[THUMB_CMC] = [0.02, 0.03, 0.0]
    return h


def test_palm_frame_canonical():
    h = flat_hand()
    pf = palm_frame(h)
    # e1 = +x; MiddleMCP - IndexMCP points to -y so e3 = x cross (-y) = -z, e2 = -y
    np.testing.assert_allclose(pf.rotation, np.diag([1.0, -1.0, -1.0]), atol=1e-12)
    np.testing.assert_allclose(pf.translation, (h[THUMB_CMC] + h[INDEX_MCP] + h[MIDDLE_MCP]) / 3)


def test_palm_frame_collinear():
    h = flat_hand()
    h[INDEX_MCP] = [0.045, 0.0, 0.0]
    with pytest.raises(DegenerateHand):
        palm_frame(h)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_palm_frame_equivariance(seed):
    g = random_transform(np.random.default_rng(seed))
    h = flat_hand()
    assert palm_frame(g.apply(h)).allclose(g @ palm_frame(h), 1e-9)


def test_keypoint_validation():
    with pytest.raises(ValueError):
        check_keypoints(np.zeros((20, 3)))
    h = flat_hand()
    h[3] = [1.0, 0.0, 0.0]
    with pytest.raises(ValueError):
        check_keypoints(h)


def _record(cam, hand_pose, h):
    return FrameRecord(0, cam, hand_pose, h)


def test_correct_hand_cancels_with_identity_poses():
    h = flat_hand()
    rec = _record(RigidTransform.identity(), palm_frame(h), h)
    for mode in (FRAME_REPLACEMENT, LITERAL):
        np.testing.assert_allclose(correct_hand(rec, RigidTransform.identity(), mode), h, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_correct_hand_cancellation_is_camera_reexpression(seed):
    rng = np.random.default_rng(seed)
    h = flat_hand()
    t0, tt = random_transform(rng), random_transform(rng)
    rec = _record(tt, palm_frame(h), h)
    expect = (invert(t0) @ tt).apply(h)
    for mode in (FRAME_REPLACEMENT, LITERAL):
        np.testing.assert_allclose(correct_hand(rec, t0, mode), expect, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_frame_replacement_recovers_planted_error(seed):
    rng = np.random.default_rng(seed)
    true_h = flat_hand()
    palm = palm_frame(true_h)
    delta = random_transform(rng)
    h_est = (palm @ delta @ invert(palm)).apply(true_h)
    rec = _record(RigidTransform.identity(), palm, h_est)
    out = correct_hand(rec, RigidTransform.identity(), FRAME_REPLACEMENT)
    np.testing.assert_allclose(out, true_h, atol=1e-9)
    # rigidity
    d0 = np.linalg.norm(h_est[:, None] - h_est[None], axis=-1)
    d1 = np.linalg.norm(out[:, None] - out[None], axis=-1)
    assert np.abs(d0 - d1).max() < 1e-9


def test_literal_order_does_not_recover_planted_error():
    rng = np.random.default_rng(3)
    true_h = flat_hand()
    palm = RigidTransform(np.eye(3), [0.1, 0.0, 0.4]) @ palm_frame(true_h)
    true_h = RigidTransform(np.eye(3), [0.1, 0.0, 0.4]).apply(true_h)
    delta = RigidTransform(random_transform(rng).rotation, [0.05, 0.0, 0.0])
    h_est = (palm @ delta @ invert(palm)).apply(true_h)
    out = correct_hand(_record(RigidTransform.identity(), palm, h_est), RigidTransform.identity(), LITERAL)
    assert np.abs(out - true_h).max() > 1e-3


def test_detect_grasp_examples():
    z = np.zeros(3)
    assert detect_grasp(z, z, 0.05) == CLOSED
    assert detect_grasp(z, [0.03, 0, 0], 0.05) == CLOSED
    assert detect_grasp(z, [0.08, 0, 0], 0.05) == OPEN
    assert detect_grasp(z, [0.05, 0, 0], 0.05) == OPEN
    with pytest.raises(ValueError):
        detect_grasp(z, z, 0.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 0.2), st.floats(0.001, 0.2), st.floats(0.0, 0.2))
def test_grasp_monotone_in_threshold(gap, th, extra):
    tips = (np.zeros(3), np.array([gap, 0.0, 0.0]))
    if detect_grasp(*tips, th) == CLOSED:
        assert detect_grasp(*tips, th + extra) == CLOSED


def test_grasp_labels_hysteresis():
    gaps = [0.09, 0.052, 0.048, 0.052, 0.048, 0.01, 0.054, 0.09]
    np.testing.assert_array_equal(grasp_labels(gaps), np.where(np.array(gaps) < 0.05, 1.0, -1.0))
    np.testing.assert_array_equal(grasp_labels(gaps, hysteresis=0.01), [-1, -1, -1, -1, -1, 1, 1, -1])


def test_extract_action_open_and_pinched():
    h_open = hand_keypoints_local(OPEN_GAP)
    a = extract_action(h_open)
    assert a.gripper == OPEN
    np.testing.assert_array_equal(a.thumb_tip, h_open[THUMB_TIP])
    np.testing.assert_array_equal(a.index_tip, h_open[INDEX_TIP])
    assert np.linalg.norm(a.thumb_tip - a.index_tip) == pytest.approx(OPEN_GAP)
    assert extract_action(hand_keypoints_local(PINCH_GAP)).gripper == CLOSED


def test_extract_action_ignores_other_keypoints():
    h = hand_keypoints_local(OPEN_GAP)
    g = h.copy()
    others = [i for i in range(21) if i not in (THUMB_TIP, INDEX_TIP)]
    g[others] += 0.01
    assert np.array_equal(extract_action(h).vector(), extract_action(g).vector())


def test_unified_action_roundtrip_and_validation():
    v = np.array([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 1.0])
    a = UnifiedAction.from_vector(v)
    assert np.array_equal(a.vector(), v)
    np.testing.assert_allclose(a.midpoint, [0.25, 0.35, 0.45])
    with pytest.raises(ValueError):
        UnifiedAction([0, 0, 0], [0, 0, np.nan], 1.0)
    with pytest.raises(ValueError):
        UnifiedAction([0, 0, 0], [0, 0, 0], 2.0)
