"""Seeded generator of labeled multi-person keypoint clips.

Two benchmark suites:

composition3
    Three formation scripts (converge, disperse, static). No ball. The label
    is visible only in how inter-person distances evolve.
interaction2
    Persons stand at random spots; about half raise their arms. A ball flies
    in from a random point and is caught by one person, who holds it for the
    rest of the clip. The label says whether the catcher has raised arms.
    Person layouts, poses and ball landing spots have the same distribution
    in both classes, so only the ball-to-person relation carries the label.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scene import Clip, LabelSpace

FRAME_SIZE = (1280.0, 720.0)
BOX_SIZE = (40.0, 100.0)
# raised arms without the ball is "blocking"; the catcher is "catching" whatever its pose,
# so individual labels never reveal the group label on their own
INDIVIDUAL_CLASSES = ("standing", "moving", "blocking", "catching")
SUITES = {
    "composition3": ("converge", "disperse", "static"),
    "interaction2": ("to_raised", "to_neutral"),
}
MOVING_THRESHOLD = 15.0

# joint offsets in box units around the box center (COCO order)
_NEUTRAL = np.array([
    [0.00, -0.40], [-0.03, -0.43], [0.03, -0.43], [-0.06, -0.41], [0.06, -0.41],
    [-0.20, -0.25], [0.20, -0.25], [-0.28, -0.08], [0.28, -0.08], [-0.30, 0.08],
    [0.30, 0.08], [-0.12, 0.05], [0.12, 0.05], [-0.13, 0.25], [0.13, 0.25],
    [-0.13, 0.45], [0.13, 0.45],
])
_RAISED = _NEUTRAL.copy()
_RAISED[[7, 8]] = [[-0.26, -0.38], [0.26, -0.38]]
_RAISED[[9, 10]] = [[-0.22, -0.50], [0.22, -0.50]]
POSES = {"neutral": _NEUTRAL, "raised": _RAISED}


def label_space(kind: str) -> LabelSpace:
    if kind not in SUITES:
        raise ValueError(f"unknown suite {kind!r}; expected one of {sorted(SUITES)}")
    return LabelSpace(SUITES[kind], INDIVIDUAL_CLASSES)


@dataclass
class ScenarioSpec:
    class_id: int
    centers: np.ndarray                 # T,N,2 person box centers
    poses: list[str]                    # per person, key into POSES
    handler: int | None = None          # person who ends up with the ball
    ball: np.ndarray | None = None      # T,2 or None when absent
    sigma: float = 2.0
    box_scale: np.ndarray | None = None  # N, multiplies BOX_SIZE
    frame_size: tuple[float, float] = FRAME_SIZE
    num_joints: int = 17
    extra: dict = field(default_factory=dict)

    @property
    def num_frames(self) -> int:
        return self.centers.shape[0]

    @property
    def num_persons(self) -> int:
        return self.centers.shape[1]


def _check_feasible(spec: ScenarioSpec) -> None:
    w, h = spec.frame_size
    scale = np.ones(spec.num_persons) if spec.box_scale is None else spec.box_scale
    half = np.array(BOX_SIZE) * scale[:, None] / 2
    lo = spec.centers - half[None]
    hi = spec.centers + half[None]
    if np.any(lo < 0) or np.any(hi[..., 0] > w) or np.any(hi[..., 1] > h):
        raise ValueError("infeasible trajectory: a person box leaves the frame")
    if spec.ball is not None:
        b = spec.ball
        if np.any(b < 0) or np.any(b[:, 0] > w) or np.any(b[:, 1] > h):
            raise ValueError("infeasible trajectory: the ball leaves the frame")
    if spec.handler is not None and not 0 <= spec.handler < spec.num_persons:
        raise ValueError(f"handler {spec.handler} out of range")
    if spec.num_joints != len(_NEUTRAL):
        raise ValueError(f"stick-figure template has {len(_NEUTRAL)} joints, not {spec.num_joints}")


def generate(spec: ScenarioSpec, seed: int) -> Clip:
    _check_feasible(spec)
    rng = np.random.default_rng(seed)
    t, n = spec.num_frames, spec.num_persons
    scale = np.ones(n) if spec.box_scale is None else spec.box_scale
    size = np.array(BOX_SIZE) * scale[:, None]                      # N,2
    boxes = np.concatenate([spec.centers - size / 2, np.broadcast_to(size, (t, n, 2))], axis=-1)
    template = np.stack([POSES[p] for p in spec.poses])             # N,K,2
    xy = spec.centers[:, :, None, :] + template[None] * size[None, :, None, :]
    if spec.sigma > 0:
        xy = xy + rng.normal(0.0, spec.sigma, size=xy.shape)
    w, h = spec.frame_size
    xy = np.clip(xy, 0.0, [w, h])
    conf = rng.uniform(0.6, 1.0, size=xy.shape[:-1] + (1,))
    keypoints = np.concatenate([xy, conf], axis=-1)

    moved = np.linalg.norm(spec.centers[-1] - spec.centers[0], axis=-1)
    indiv = np.where(moved > MOVING_THRESHOLD, 1, 0).astype(np.int64)
    indiv[np.array([p == "raised" for p in spec.poses])] = 2
    if spec.handler is not None:
        indiv[spec.handler] = 3
    objects = np.zeros((t, 0, 2)) if spec.ball is None else spec.ball[:, None, :].copy()
    return Clip(
        frame_size=spec.frame_size,
        boxes=boxes,
        keypoints=keypoints,
        objects=objects,
        person_mask=np.ones(n, dtype=bool),
        object_mask=np.ones(objects.shape[1], dtype=bool),
        group_label=spec.class_id,
        individual_labels=indiv,
    )


def formation_spec(script: str, rng: np.random.Generator, num_persons: int,
                   num_frames: int = 10, sigma: float = 2.0) -> ScenarioSpec:
    """Persons on an ellipse whose radius shrinks, grows, or holds over the clip."""
    w, h = FRAME_SIZE
    r0 = rng.uniform(100, 200)
    growth = {"converge": 0.5, "disperse": 1.6, "static": 1.0}[script]
    center = np.array([rng.uniform(w / 2 - 120, w / 2 + 120), rng.uniform(h / 2 - 40, h / 2 + 40)])
    angles = np.sort(rng.uniform(0, 2 * np.pi, num_persons))
    s = np.linspace(0.0, 1.0, num_frames)
    radius = r0 * (1 + (growth - 1) * s)                                  # T
    unit = np.stack([np.cos(angles), 0.45 * np.sin(angles)], axis=-1)     # N,2
    centers = center + radius[:, None, None] * unit[None]
    class_id = SUITES["composition3"].index(script)
    return ScenarioSpec(class_id=class_id, centers=centers, poses=["neutral"] * num_persons,
                        sigma=sigma, box_scale=rng.uniform(0.9, 1.1, num_persons))


def _arc(a: np.ndarray, b: np.ndarray, s: float, height: float) -> np.ndarray:
    """Point at fraction s along a parabolic arc from a to b peaking ``height`` px up."""
    p = (1 - s) * a + s * b
    p[1] -= height * 4 * s * (1 - s)
    return p


def _scatter_persons(rng, num_persons, min_gap=130.0):
    w, h = FRAME_SIZE
    pts = []
    while len(pts) < num_persons:
        p = np.array([rng.uniform(100, w - 100), rng.uniform(120, h - 120)])
        if all(np.linalg.norm(p - q) >= min_gap for q in pts):
            pts.append(p)
    return np.stack(pts)


def interaction_spec(target: str, rng: np.random.Generator, num_persons: int,
                     num_frames: int = 10, sigma: float = 2.0) -> ScenarioSpec:
    """Ball caught by a raised-arms person ("to_raised") or a neutral one ("to_neutral")."""
    if num_persons < 2:
        raise ValueError("interaction scenes need at least two persons")
    w, h = FRAME_SIZE
    start = _scatter_persons(rng, num_persons)
    drift = np.cumsum(rng.normal(0.0, 1.5, size=(num_frames, num_persons, 2)), axis=0)
    drift -= drift[0]
    centers = start[None] + drift
    raised = rng.permutation(np.arange(num_persons) < num_persons // 2 + rng.integers(0, num_persons % 2 + 1))
    poses = ["raised" if r else "neutral" for r in raised]
    pool = np.flatnonzero(raised if target == "to_raised" else ~raised)
    handler = int(rng.choice(pool))

    # parabolic flight in from a random point, then held at the catcher's hands
    arrive = int(rng.integers(num_frames // 2 - 2, num_frames // 2 + 1))
    hand = np.array([0.0, -0.45 * BOX_SIZE[1]])
    origin = np.array([rng.uniform(60, w - 60), rng.uniform(60, h - 60)])
    height = rng.uniform(40.0, 100.0)
    ball = np.zeros((num_frames, 2))
    for t in range(num_frames):
        if t < arrive:
            ball[t] = _arc(origin, centers[arrive, handler] + hand, t / arrive, height)
        else:
            ball[t] = centers[t, handler] + hand
    ball = np.clip(ball, 0.0, [w, h])
    class_id = SUITES["interaction2"].index(target)
    return ScenarioSpec(class_id=class_id, centers=centers, poses=poses, handler=handler,
                        ball=ball, sigma=sigma, box_scale=rng.uniform(0.9, 1.1, num_persons))


def sample_spec(kind: str, class_id: int, rng: np.random.Generator, max_persons: int = 6,
                min_persons: int = 4, num_frames: int = 10) -> ScenarioSpec:
    classes = label_space(kind).group_classes
    n = int(rng.integers(min_persons, max_persons + 1))
    if kind == "composition3":
        return formation_spec(classes[class_id], rng, n, num_frames)
    return interaction_spec(classes[class_id], rng, n, num_frames)


def benchmark_suite(kind: str, seed: int = 0, n_train: int = 300, n_test: int = 100,
                    max_persons: int = 6, num_frames: int = 10) -> tuple[list[Clip], list[Clip]]:
    """Balanced, disjoint train/test clip lists; every clip has its own derived seed."""
    classes = label_space(kind).group_classes
    splits = []
    for split_id, count in enumerate((n_train, n_test)):
        clips = []
        for i in range(count):
            ss = np.random.SeedSequence([seed, split_id, i])
            spec_rng, noise_seed = np.random.default_rng(ss.spawn(1)[0]), int(ss.generate_state(1)[0])
            spec = sample_spec(kind, i % len(classes), spec_rng, max_persons, num_frames=num_frames)
            clips.append(generate(spec, noise_seed))
        splits.append(clips)
    return splits[0], splits[1]


def pairwise_distance_curve(clip: Clip) -> np.ndarray:
    """Mean pairwise distance between valid person box centers, per frame."""
    centers = (clip.boxes[..., :2] + clip.boxes[..., 2:] / 2)[:, clip.person_mask]
    diff = centers[:, :, None, :] - centers[:, None, :, :]
    d = np.linalg.norm(diff, axis=-1)
    n = centers.shape[1]
    iu = np.triu_indices(n, k=1)
    return d[:, iu[0], iu[1]].mean(axis=1)


class FormationCentroidClassifier:
    """Nearest centroid on pairwise-distance curves normalized by their first frame."""

    def fit(self, clips: list[Clip]) -> "FormationCentroidClassifier":
        X = np.stack([self._curve(c) for c in clips])
        y = np.array([c.group_label for c in clips])
        self.classes_ = np.unique(y)
        self.centroids_ = np.stack([X[y == k].mean(axis=0) for k in self.classes_])
        return self

    @staticmethod
    def _curve(clip):
        curve = pairwise_distance_curve(clip)
        return curve / curve[0]

    def predict(self, clips: list[Clip]) -> np.ndarray:
        X = np.stack([self._curve(c) for c in clips])
        d = ((X[:, None, :] - self.centroids_[None]) ** 2).sum(-1)
        return self.classes_[d.argmin(axis=1)]

    def score(self, clips: list[Clip]) -> float:
        y = np.array([c.group_label for c in clips])
        return float((self.predict(clips) == y).mean())
