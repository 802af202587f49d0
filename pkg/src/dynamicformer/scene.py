"""Clip records, label vocabularies, JSON clip files, padding and smoothing."""
from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig

VOLLEYBALL_GROUP = ("r_set", "r_pass", "r_spike", "r_winpoint",
                    "l_set", "l_pass", "l_spike", "l_winpoint")
VOLLEYBALL_INDIV = ("setting", "digging", "falling", "jumping", "blocking",
                    "moving", "spiking", "waiting", "standing")
COLLECTIVE_GROUP = ("waiting", "talking", "queuing", "crossing", "walking")


class ClipFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LabelSpace:
    group_classes: tuple[str, ...]
    individual_classes: tuple[str, ...] = ()

    @classmethod
    def volleyball(cls) -> "LabelSpace":
        return cls(VOLLEYBALL_GROUP, VOLLEYBALL_INDIV)

    @classmethod
    def collective(cls) -> "LabelSpace":
        return cls(COLLECTIVE_GROUP, ())

    def group_id(self, name: str) -> int:
        try:
            return self.group_classes.index(name)
        except ValueError:
            raise ClipFormatError(f"unknown group activity {name!r}") from None

    def individual_id(self, name: str | None) -> int:
        if not self.individual_classes:
            return -1
        try:
            return self.individual_classes.index(name)
        except ValueError:
            raise ClipFormatError(f"unknown individual action {name!r}") from None

    def to_dict(self) -> dict:
        return {"group_classes": list(self.group_classes),
                "individual_classes": list(self.individual_classes)}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelSpace":
        return cls(tuple(d["group_classes"]), tuple(d.get("individual_classes", ())))


@dataclass(frozen=True, eq=False)
class Clip:
    """One scene. Arrays are frame-major: boxes (T,N,4), keypoints (T,N,K,3), objects (T,E,2)."""

    frame_size: tuple[float, float]
    boxes: np.ndarray
    keypoints: np.ndarray
    objects: np.ndarray
    person_mask: np.ndarray
    object_mask: np.ndarray
    group_label: int
    individual_labels: np.ndarray
    subgroups: np.ndarray | None = None

    @property
    def num_frames(self) -> int:
        return self.keypoints.shape[0]

    @property
    def num_persons(self) -> int:
        return self.keypoints.shape[1]

    @property
    def num_joints(self) -> int:
        return self.keypoints.shape[2]

    @property
    def num_objects(self) -> int:
        return self.objects.shape[1]

    @property
    def keypoint_valid(self) -> np.ndarray:
        """(T,N,K) flags: real person, positive confidence, inside the frame."""
        w, h = self.frame_size
        x, y, c = self.keypoints[..., 0], self.keypoints[..., 1], self.keypoints[..., 2]
        inside = (x >= 0) & (x <= w) & (y >= 0) & (y <= h)
        return inside & (c > 0) & self.person_mask[None, :, None]

    def replace(self, **kw) -> "Clip":
        return dataclasses.replace(self, **kw)

    def equals(self, other: "Clip") -> bool:
        """Bit-exact comparison of every field."""
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and a.dtype == b.dtype and np.array_equal(a, b)
        return (tuple(self.frame_size) == tuple(other.frame_size)
                and self.group_label == other.group_label
                and all(same(getattr(self, f), getattr(other, f))
                        for f in ("boxes", "keypoints", "objects", "person_mask",
                                  "object_mask", "individual_labels", "subgroups")))


def _array(value, shape_tail, what):
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape[1:] != shape_tail:
        raise ClipFormatError(f"{what}: expected trailing shape {shape_tail}, got {arr.shape}")
    return arr


def clip_from_dict(doc: dict, labels: LabelSpace, config: ModelConfig | None = None) -> Clip:
    required = ("frame_size", "num_frames", "persons", "objects", "group_activity")
    missing = [k for k in required if k not in doc]
    if missing:
        raise ClipFormatError(f"missing keys {missing}")
    w, h = (float(v) for v in doc["frame_size"])
    if w <= 0 or h <= 0:
        raise ClipFormatError(f"frame_size must be positive, got {doc['frame_size']}")
    t = int(doc["num_frames"])
    persons, objects = doc["persons"], doc["objects"]
    if config is not None:
        if t != config.num_frames:
            raise ClipFormatError(f"clip has T={t}, config expects {config.num_frames}")
        if len(persons) > config.max_persons:
            raise ClipFormatError(f"{len(persons)} persons exceed capacity {config.max_persons}")
        if len(objects) > config.max_objects:
            raise ClipFormatError(f"{len(objects)} objects exceed capacity {config.max_objects}")
    if not persons:
        raise ClipFormatError("clip has no persons")

    k = None
    boxes, kps, actions = [], [], []
    for i, p in enumerate(persons):
        for key in ("boxes", "keypoints", "action"):
            if key not in p:
                raise ClipFormatError(f"person {i}: missing {key!r}")
        b = _array(p["boxes"], (4,), f"person {i} boxes")
        kp = np.asarray(p["keypoints"], dtype=np.float64)
        if kp.ndim != 3 or kp.shape[2] != 3:
            raise ClipFormatError(f"person {i} keypoints: expected [T][K][3], got {kp.shape}")
        if b.shape[0] != t or kp.shape[0] != t:
            raise ClipFormatError(f"person {i}: expected {t} frames")
        k = kp.shape[1] if k is None else k
        if kp.shape[1] != k:
            raise ClipFormatError(f"person {i}: inconsistent joint count")
        if np.any((kp[..., 2] < 0) | (kp[..., 2] > 1)):
            raise ClipFormatError(f"person {i}: confidence outside [0,1]")
        boxes.append(b)
        kps.append(kp)
        actions.append(labels.individual_id(p["action"]))
    if config is not None and k != config.num_joints:
        raise ClipFormatError(f"clip has K={k}, config expects {config.num_joints}")

    objs = []
    for i, o in enumerate(objects):
        if "coords" not in o:
            raise ClipFormatError(f"object {i}: missing 'coords'")
        c = _array(o["coords"], (2,), f"object {i} coords")
        if c.shape[0] != t:
            raise ClipFormatError(f"object {i}: expected {t} frames")
        objs.append(c)

    n, e = len(persons), len(objects)
    subgroups = doc.get("subgroups")
    if subgroups is not None:
        subgroups = np.asarray(subgroups, dtype=np.int64)
        if subgroups.shape != (n,) or np.any(subgroups < 0):
            raise ClipFormatError("subgroups must list one nonnegative id per person")
        if config is not None and np.any(subgroups >= config.num_subgroups):
            raise ClipFormatError(f"subgroup id out of range [0,{config.num_subgroups})")
    return Clip(
        frame_size=(w, h),
        boxes=np.stack(boxes, axis=1),
        keypoints=np.stack(kps, axis=1),
        objects=np.stack(objs, axis=1) if objs else np.zeros((t, 0, 2)),
        person_mask=np.ones(n, dtype=bool),
        object_mask=np.ones(e, dtype=bool),
        group_label=labels.group_id(doc["group_activity"]),
        individual_labels=np.asarray(actions, dtype=np.int64),
        subgroups=subgroups,
    )


def clip_to_dict(clip: Clip, labels: LabelSpace) -> dict:
    """Serialize valid slots only; padded slots are reconstructed by pad_and_mask."""
    persons = []
    for n in np.flatnonzero(clip.person_mask):
        lab = int(clip.individual_labels[n])
        persons.append({
            "boxes": clip.boxes[:, n].tolist(),
            "keypoints": clip.keypoints[:, n].tolist(),
            "action": labels.individual_classes[lab] if lab >= 0 else None,
        })
    doc = {
        "frame_size": [float(v) for v in clip.frame_size],
        "num_frames": clip.num_frames,
        "persons": persons,
        "objects": [{"coords": clip.objects[:, e].tolist()} for e in np.flatnonzero(clip.object_mask)],
        "group_activity": labels.group_classes[clip.group_label],
    }
    if clip.subgroups is not None:
        doc["subgroups"] = [int(s) for s in clip.subgroups[clip.person_mask]]
    return doc


def save_clip(clip: Clip, path: str | Path, labels: LabelSpace) -> None:
    Path(path).write_text(json.dumps(clip_to_dict(clip, labels)))


def load_clip(path: str | Path, labels: LabelSpace, config: ModelConfig | None = None) -> Clip:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ClipFormatError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ClipFormatError(f"{path}: top level must be an object")
    return clip_from_dict(doc, labels, config)


def pad_and_mask(clip: Clip, config: ModelConfig) -> Clip:
    n, e = config.max_persons, config.max_objects
    if clip.num_persons > n or clip.num_objects > e:
        raise ClipFormatError(f"clip has {clip.num_persons} persons/{clip.num_objects} objects, "
                              f"capacity is {n}/{e}")
    if clip.num_persons == n and clip.num_objects == e:
        return clip
    t, k = clip.num_frames, clip.num_joints
    dn, de = n - clip.num_persons, e - clip.num_objects

    def grow(a, extra, axis):
        shape = list(a.shape)
        shape[axis] = extra
        return np.concatenate([a, np.zeros(shape, dtype=a.dtype)], axis=axis)

    return clip.replace(
        boxes=grow(clip.boxes, dn, 1),
        keypoints=grow(clip.keypoints, dn, 1),
        objects=grow(clip.objects, de, 1),
        person_mask=grow(clip.person_mask, dn, 0),
        object_mask=grow(clip.object_mask, de, 0),
        individual_labels=np.concatenate([clip.individual_labels, np.full(dn, -1, dtype=np.int64)]),
        subgroups=None if clip.subgroups is None else
        np.concatenate([clip.subgroups, np.full(dn, -1, dtype=np.int64)]),
    )


def subgroup_assignment(clip: Clip, num_subgroups: int = 2) -> np.ndarray:
    """Person -> subgroup id; -1 for padded slots.

    Without an explicit assignment, valid persons are ranked by box-center x
    on the middle frame and split into ``num_subgroups`` contiguous runs
    (court halves for two subgroups).
    """
    out = np.full(clip.num_persons, -1, dtype=np.int64)
    valid = np.flatnonzero(clip.person_mask)
    if clip.subgroups is not None:
        out[valid] = clip.subgroups[valid]
        return out
    mid = clip.num_frames // 2
    cx = clip.boxes[mid, valid, 0] + clip.boxes[mid, valid, 2] / 2
    order = valid[np.argsort(cx, kind="stable")]
    for m, members in enumerate(np.array_split(order, num_subgroups)):
        out[members] = m
    return out


def temporal_smooth(clip: Clip, window: int) -> Clip:
    """Median-filter keypoint x/y over time.

    The window is centered and shrinks symmetrically near the clip ends, so
    endpoints and straight-line motion are left untouched. Only frames where
    the joint is valid take part in a median; invalid samples are not
    modified.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd count, got {window}")
    t = clip.num_frames
    if window > t:
        raise ValueError(f"window {window} exceeds clip length {t}")
    if window == 1:
        return clip
    r = window // 2
    kp = clip.keypoints.copy()
    valid = clip.keypoint_valid
    for i in range(t):
        h = min(r, i, t - 1 - i)
        if h == 0:
            continue
        seg = clip.keypoints[i - h:i + h + 1, ..., :2]
        seg_valid = valid[i - h:i + h + 1]
        masked = np.where(seg_valid[..., None], seg, np.nan)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)  # all-invalid slices
            med = np.nanmedian(masked, axis=0)
        upd = valid[i] & seg_valid.any(axis=0)
        kp[i, ..., :2] = np.where(upd[..., None], med, kp[i, ..., :2])
    return clip.replace(keypoints=kp)
