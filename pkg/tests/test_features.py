import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dynamicformer.features import (FeatureExtractor, Unify, aggregate_group, aggregate_person, collate,
                                    featurize, keypoint_features, object_features)
from dynamicformer.gradcheck import check_gradients
from dynamicformer.scene import Clip

from conftest import random_clip, tiny_config


def one_joint_clip(xs, ys, box_center, frame=(200.0, 100.0)):
    t = len(xs)
    kp = np.zeros((t, 1, 1, 3))
    kp[:, 0, 0, 0], kp[:, 0, 0, 1], kp[..., 2] = xs, ys, 1.0
    boxes = np.zeros((t, 1, 4))
    boxes[:, 0] = [box_center[0] - 10, box_center[1] - 20, 20, 40]
    return Clip(frame_size=frame, boxes=boxes, keypoints=kp, objects=np.zeros((t, 1, 2)),
                person_mask=np.ones(1, bool), object_mask=np.ones(1, bool), group_label=0,
                individual_labels=np.zeros(1, np.int64))


def oracle_keypoint_features(clip):
    # straight-line recomputation, one joint at a time
    t, n, k = clip.keypoints.shape[:3]
    w, h = clip.frame_size
    out = np.zeros((n, k, t, 11))
    for i in range(n):
        for j in range(k):
            for f in range(t):
                x, y, c = clip.keypoints[f, i, j]
                if not (clip.person_mask[i] and c > 0 and 0 <= x <= w and 0 <= y <= h):
                    continue
                bx, by, bw, bh = clip.boxes[f, i]
                cx, cy = bx + bw / 2, by + bh / 2
                row = [x, y, x - cx, y - cy, 0, 0, 0, 0, x / w, y / h, j]
                if f > 0:
                    px, py, pc = clip.keypoints[f - 1, i, j]
                    if pc > 0 and 0 <= px <= w and 0 <= py <= h:
                        qbx, qby, qbw, qbh = clip.boxes[f - 1, i]
                        row[4], row[5] = x - px, y - py
                        row[6] = (x - cx) - (px - (qbx + qbw / 2))
                        row[7] = (y - cy) - (py - (qby + qbh / 2))
                out[i, j, f] = row
    return out


def test_stationary_joint_at_person_center():
    clip = one_joint_clip([60.0] * 3, [40.0] * 3, (60.0, 40.0))
    feat, valid = keypoint_features(clip)
    assert valid.all()
    assert feat[0, 0].tolist() == [[60.0, 40.0, 0, 0, 0, 0, 0, 0, 0.3, 0.4, 0]] * 3


def test_constant_velocity_joint():
    clip = one_joint_clip([10.0, 13.0, 16.0, 19.0], [50.0] * 4, (100.0, 50.0))
    feat, _ = keypoint_features(clip)
    assert feat[0, 0, :, 4].tolist() == [0.0, 3.0, 3.0, 3.0]
    # box is static, so the relative velocity equals the absolute one
    assert feat[0, 0, :, 6].tolist() == [0.0, 3.0, 3.0, 3.0]


def test_invalid_joints_are_zero_rows():
    clip = one_joint_clip([10.0, 13.0, 16.0], [50.0] * 3, (10.0, 50.0))
    kp = clip.keypoints.copy()
    kp[1, 0, 0, 2] = 0.0
    feat, valid = keypoint_features(clip.replace(keypoints=kp))
    assert valid[0, 0].tolist() == [True, False, True]
    assert np.all(feat[0, 0, 1] == 0)
    # frame 2 follows an invalid frame, so its velocity is zero
    assert feat[0, 0, 2, 4] == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_keypoint_channels_match_oracle(seed):
    rng = np.random.default_rng(seed)
    clip = random_clip(rng, t=5, n=3, k=4, e=1)
    kp = clip.keypoints.copy()
    kp[2, 1, 3, 2] = 0.0            # one dropped joint
    kp[0, 0, 1, 0] = -5.0           # one joint outside the frame
    clip = clip.replace(keypoints=kp)
    feat, _ = keypoint_features(clip)
    assert np.array_equal(feat, oracle_keypoint_features(clip))


def test_static_object_and_persons_have_zero_velocities(rng):
    clip = random_clip(rng, t=4, n=2, k=3, e=1)
    clip = clip.replace(boxes=np.repeat(clip.boxes[:1], 4, 0), objects=np.repeat(clip.objects[:1], 4, 0))
    assert np.all(object_features(clip)[..., 4:] == 0)


def test_parabolic_ball_velocities():
    t = 6
    f = np.arange(t, dtype=np.float64)
    x, y = 10.0 + 4.0 * f, 80.0 - 12.0 * f + 1.5 * f ** 2
    clip = one_joint_clip([50.0] * t, [50.0] * t, (50.0, 50.0))
    clip = clip.replace(objects=np.stack([x, y], -1)[:, None, :])
    feat = object_features(clip)[0]
    # x_t - x_{t-1} = 4, y_t - y_{t-1} = -12 + 1.5 (2t - 1)
    assert np.allclose(feat[1:, 4], 4.0, atol=1e-12)
    assert np.allclose(feat[1:, 5], -12.0 + 1.5 * (2 * f[1:] - 1), atol=1e-12)
    # persons are static, so relative velocity equals absolute velocity
    assert np.allclose(feat[:, 6:], feat[:, 4:6], atol=1e-12)
    assert np.all(feat[0, 4:] == 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-15, 15), st.floats(-15, 15))
def test_translation_invariance(seed, dx, dy):
    clip = random_clip(np.random.default_rng(seed), t=4, n=3, k=4, e=1)
    shift = np.array([dx, dy])
    kp = clip.keypoints.copy()
    kp[..., :2] += shift
    boxes = clip.boxes.copy()
    boxes[..., :2] += shift
    moved = clip.replace(keypoints=kp, boxes=boxes, objects=clip.objects + shift)
    a, _ = keypoint_features(clip)
    b, _ = keypoint_features(moved)
    assert np.allclose(a[..., 2:8], b[..., 2:8], atol=1e-9)
    assert np.allclose(b[..., :2] - a[..., :2], shift, atol=1e-9)
    assert np.allclose(b[..., 8:10] - a[..., 8:10], shift / np.array(clip.frame_size), atol=1e-12)
    oa, ob = object_features(clip), object_features(moved)
    assert np.allclose(oa[..., 2:], ob[..., 2:], atol=1e-9)


def test_aggregate_person_oracle(rng):
    S = torch.from_numpy(rng.normal(size=(2, 3, 5, 4, 6)))
    valid = torch.from_numpy(rng.random((2, 3, 5, 4)) > 0.4)
    valid[0, 1, :, 2] = False
    P, empty = aggregate_person(S * valid[..., None], valid)
    for b in range(2):
        for n in range(3):
            for t in range(4):
                idx = valid[b, n, :, t].nonzero().flatten()
                if len(idx) == 0:
                    assert empty[b, n, t] and torch.all(P[b, n, t] == 0)
                else:
                    expected = sum(S[b, n, j, t] for j in idx.tolist()) / len(idx)
                    assert torch.allclose(P[b, n, t], expected, atol=1e-12, rtol=0)


def test_aggregate_group_oracle(rng):
    P = torch.from_numpy(rng.normal(size=(2, 5, 3, 4)))
    assignment = torch.tensor([[0, 1, 1, 0, -1], [1, 1, 1, -1, -1]])
    G, empty = aggregate_group(P, assignment, 2)
    for b in range(2):
        for m in range(2):
            members = [i for i in range(5) if assignment[b, i] == m]
            if not members:
                assert empty[b, m] and torch.all(G[b, m] == 0)
            else:
                expected = sum(P[b, i] for i in members) / len(members)
                assert torch.allclose(G[b, m], expected, atol=1e-12, rtol=0)


def test_aggregations_are_member_permutation_invariant(rng):
    S = torch.from_numpy(rng.normal(size=(1, 2, 6, 3, 4)))
    valid = torch.ones(1, 2, 6, 3, dtype=torch.bool)
    perm = torch.randperm(6)
    assert torch.allclose(aggregate_person(S, valid)[0], aggregate_person(S[:, :, perm], valid)[0], atol=1e-12)
    P = torch.from_numpy(rng.normal(size=(1, 4, 3, 4)))
    a = torch.tensor([[0, 1, 0, 1]])
    p = torch.tensor([2, 3, 0, 1])
    assert torch.allclose(aggregate_group(P, a, 2)[0], aggregate_group(P[:, p], a[:, p], 2)[0], atol=1e-12)


def test_unify_zero_bias_keeps_padding_zero():
    u = Unify(11, 8).double()
    x = torch.zeros(2, 3, 11, dtype=torch.float64)
    assert torch.equal(u(x), torch.zeros(2, 3, 8, dtype=torch.float64))
    with pytest.raises(ValueError):
        u(torch.zeros(1, 10, dtype=torch.float64))


def test_unify_gradients():
    torch.manual_seed(2)
    u = Unify(11, 8).double()
    x = torch.randn(3, 11, dtype=torch.float64)
    errs = check_gradients(lambda: (u(x) ** 2).sum(), {"x": x, **dict(u.named_parameters())})
    assert max(errs.values()) < 1e-4, errs


def test_extractor_streams_and_padding(rng):
    cfg = tiny_config(max_persons=5)
    clip = random_clip(rng, t=3, n=3, k=4, e=1)
    batch = collate([featurize(clip, cfg)], torch.float64)
    assert batch["keypoints"].shape == (1, 5, 4, 3, 11)
    fx = FeatureExtractor(cfg).double()
    out = fx(batch)
    assert out["S"].shape == (1, 5, 4, 3, 8)
    assert out["P"].shape == (1, 5, 3, 8) and out["G"].shape == (1, 2, 3, 8)
    assert out["O"].shape == (1, 1, 3, 8)
    assert torch.all(out["S"][0, 3:] == 0) and torch.all(out["P"][0, 3:] == 0)


def test_extractor_ignores_padded_slot_contents(rng):
    cfg = tiny_config(max_persons=5)
    fx = FeatureExtractor(cfg).double()
    batch = collate([featurize(random_clip(rng, t=3, n=3, k=4, e=1), cfg)], torch.float64)
    noisy = dict(batch)
    noisy["keypoints"] = batch["keypoints"].clone()
    noisy["keypoints"][0, 3:] = 1e3
    a, b = fx(batch), fx(noisy)
    for name in ("S", "P", "G"):
        assert torch.equal(a[name], b[name])
