"""Raw geometric features from clips and the learned projection to width D."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .nn import glorot_linear, masked_mean
from .scene import Clip, pad_and_mask, subgroup_assignment

KEYPOINT_CHANNELS = 11
OBJECT_CHANNELS = 8


def _forward_diff(x: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """v_t = x_t - x_{t-1} along axis 0; zero at t=0 or when either frame is invalid."""
    v = np.zeros_like(x)
    v[1:] = x[1:] - x[:-1]
    ok = np.zeros(valid.shape, dtype=bool)
    ok[1:] = valid[1:] & valid[:-1]
    return np.where(ok[..., None], v, 0.0)


def person_centers(clip: Clip) -> np.ndarray:
    """Bounding-box centers, (T,N,2)."""
    return clip.boxes[..., :2] + clip.boxes[..., 2:] / 2


def keypoint_features(clip: Clip) -> tuple[np.ndarray, np.ndarray]:
    """Per joint-frame features, returned as (N,K,T,11) plus (N,K,T) validity.

    Channels: absolute x,y | x,y relative to the box center | absolute
    velocity | relative velocity | x/W, y/H | joint type index. Invalid
    joints are all-zero rows.
    """
    valid = clip.keypoint_valid                       # T,N,K
    xy = clip.keypoints[..., :2]                      # T,N,K,2
    rel = xy - person_centers(clip)[:, :, None, :]
    w, h = clip.frame_size
    t, n, k = valid.shape
    joint_type = np.broadcast_to(np.arange(k, dtype=np.float64)[None, None, :, None], (t, n, k, 1))
    feat = np.concatenate([
        xy,
        rel,
        _forward_diff(xy, valid),
        _forward_diff(rel, valid),
        xy / np.array([w, h]),
        joint_type,
    ], axis=-1)
    feat = np.where(valid[..., None], feat, 0.0)
    return feat.transpose(1, 2, 0, 3).copy(), valid.transpose(1, 2, 0).copy()


def object_features(clip: Clip) -> np.ndarray:
    """Per object-frame features, (E,T,8).

    Channels: absolute x,y | x,y relative to the mean person center |
    absolute velocity | relative velocity. Padded objects are zero.
    """
    t, e = clip.num_frames, clip.num_objects
    if e == 0:
        return np.zeros((0, t, OBJECT_CHANNELS))
    centers = person_centers(clip)[:, clip.person_mask]          # T,n,2
    mean_center = centers.mean(axis=1)                           # T,2
    xy = clip.objects                                            # T,E,2
    rel = xy - mean_center[:, None, :]
    valid = np.broadcast_to(clip.object_mask[None, :], (t, e))
    feat = np.concatenate([xy, rel, _forward_diff(xy, valid), _forward_diff(rel, valid)], axis=-1)
    feat = np.where(valid[..., None], feat, 0.0)
    return feat.transpose(1, 0, 2).copy()


@dataclass
class ClipFeatures:
    keypoints: np.ndarray       # N,K,T,11
    keypoint_valid: np.ndarray  # N,K,T
    objects: np.ndarray         # E,T,8
    object_mask: np.ndarray     # E
    person_mask: np.ndarray     # N
    subgroups: np.ndarray       # N, -1 for padded
    group_label: int
    individual_labels: np.ndarray  # N, -1 for padded


def featurize(clip: Clip, config: ModelConfig, pad: bool = True) -> ClipFeatures:
    """Raw features for one clip; ``pad=False`` keeps the clip's natural slot counts."""
    if pad:
        clip = pad_and_mask(clip, config)
    kp, kp_valid = keypoint_features(clip)
    return ClipFeatures(
        keypoints=kp,
        keypoint_valid=kp_valid,
        objects=object_features(clip),
        object_mask=clip.object_mask.copy(),
        person_mask=clip.person_mask.copy(),
        subgroups=subgroup_assignment(clip, config.num_subgroups),
        group_label=int(clip.group_label),
        individual_labels=clip.individual_labels.copy(),
    )


def collate(items: list[ClipFeatures], dtype=torch.float32) -> dict[str, torch.Tensor]:
    def stack(name, dt=None):
        arr = np.stack([getattr(it, name) for it in items])
        t = torch.from_numpy(arr)
        return t.to(dt) if dt is not None else t
    return {
        "keypoints": stack("keypoints", dtype),
        "keypoint_valid": stack("keypoint_valid"),
        "objects": stack("objects", dtype),
        "object_mask": stack("object_mask"),
        "person_mask": stack("person_mask"),
        "subgroups": stack("subgroups"),
        "group_label": torch.tensor([it.group_label for it in items], dtype=torch.long),
        "individual_labels": stack("individual_labels"),
    }


class Unify(nn.Module):
    """f -> w2(relu(w1 f + b1)) + b2."""

    def __init__(self, d_in: int, d_model: int):
        super().__init__()
        self.w1 = glorot_linear(d_in, d_model)
        self.w2 = glorot_linear(d_model, d_model)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        if f.shape[-1] != self.w1.in_features:
            raise ValueError(f"unify expects {self.w1.in_features} channels, got {f.shape[-1]}")
        return self.w2(F.relu(self.w1(f)))


def aggregate_person(S: torch.Tensor, valid: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean over valid joints: (B,N,K,T,D) -> (B,N,T,D); flags (B,N,T) with no valid joint."""
    return masked_mean(S, valid, dim=2)


def aggregate_group(P: torch.Tensor, assignment: torch.Tensor, num_groups: int
                    ) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean of member person features per subgroup: (B,N,T,D) -> (B,M,T,D).

    ``assignment`` is (B,N) with -1 for padded persons. Also returns (B,M)
    flags for empty subgroups, whose features are zero.
    """
    onehot = (assignment.unsqueeze(1) == torch.arange(num_groups, device=P.device)[None, :, None])
    w = onehot.to(P.dtype)                                  # B,M,N
    count = w.sum(-1)
    G = torch.einsum("bmn,bntd->bmtd", w, P) / count.clamp(min=1)[..., None, None]
    return G, count == 0


class FeatureExtractor(nn.Module):
    """Projects raw features to the four D-wide streams O, S, P, G."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        c = config
        self.config = c
        self.unify_keypoint = Unify(KEYPOINT_CHANNELS, c.d_model)
        self.unify_person = Unify(c.d_model, c.d_model)
        self.unify_group = Unify(c.d_model, c.d_model)
        self.unify_object = Unify(OBJECT_CHANNELS, c.d_model) if c.max_objects else None
        self.object_pos = nn.Parameter(torch.zeros(max(c.max_objects, 1), c.d_model))
        nn.init.normal_(self.object_pos, std=0.02)
        pos, off, vel = c.position_scale, c.offset_scale, c.velocity_scale
        kp_scale = [pos, pos, off, off, vel, vel, vel, vel, 1.0, 1.0, 1.0 / max(c.num_joints - 1, 1)]
        # object offsets from the group center span the court, so they use the position scale
        obj_scale = [pos, pos, pos, pos, vel, vel, vel, vel]
        self.register_buffer("keypoint_scale", torch.tensor(kp_scale), persistent=False)
        self.register_buffer("object_scale", torch.tensor(obj_scale), persistent=False)

    def forward(self, batch: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
        kp_valid = batch["keypoint_valid"]
        pmask = batch["person_mask"]
        S = self.unify_keypoint(batch["keypoints"] * self.keypoint_scale)
        S = S * kp_valid.unsqueeze(-1).to(S.dtype)
        P_raw, no_joint = aggregate_person(S, kp_valid)
        person_frame_valid = pmask.unsqueeze(-1) & ~no_joint          # B,N,T
        P = self.unify_person(P_raw) * person_frame_valid.unsqueeze(-1).to(S.dtype)
        G_raw, empty = aggregate_group(P, batch["subgroups"], self.config.num_subgroups)
        group_mask = ~empty
        G = self.unify_group(G_raw) * group_mask[..., None, None].to(S.dtype)
        omask = batch["object_mask"]
        e = omask.shape[1]
        if e and self.unify_object is not None:
            O = self.unify_object(batch["objects"] * self.object_scale) + self.object_pos[:e, None, :]
            O = O * omask[..., None, None].to(S.dtype)
        else:
            O = S.new_zeros(S.shape[0], e, S.shape[3], S.shape[4])
        return {"S": S, "P": P, "G": G, "O": O, "keypoint_valid": kp_valid,
                "person_mask": pmask, "group_mask": group_mask, "object_mask": omask}
