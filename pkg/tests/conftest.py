import numpy as np
import pytest
import torch

from dynamicformer.config import ModelConfig
from dynamicformer.scene import Clip, LabelSpace


def tiny_config(**kw) -> ModelConfig:
    """Smallest useful model: N=3, T=3, K=4, E=1, D=8, one layer per stage."""
    base = dict(d_model=8, heads=2, ffn_dim=16, num_frames=3, num_joints=4, max_persons=3,
                max_objects=1, dcm_layers=1, integration_layers=1, dropout=0.0,
                num_group_classes=3, num_indiv_classes=2)
    base.update(kw)
    return ModelConfig(**base)


TINY_LABELS = LabelSpace(("a", "b", "c"), ("x", "y"))


def random_clip(rng: np.random.Generator, t=3, n=3, k=4, e=1, frame=(200.0, 120.0),
                group_label=0, n_classes=2) -> Clip:
    w, h = frame
    centers = rng.uniform([30, 30], [w - 30, h - 30], size=(t, n, 2))
    size = np.array([20.0, 40.0])
    boxes = np.concatenate([centers - size / 2, np.broadcast_to(size, (t, n, 2))], axis=-1)
    xy = centers[:, :, None, :] + rng.uniform(-10, 10, size=(t, n, k, 2))
    conf = rng.uniform(0.5, 1.0, size=(t, n, k, 1))
    objects = rng.uniform([0, 0], [w, h], size=(t, e, 2))
    return Clip(
        frame_size=(w, h),
        boxes=boxes,
        keypoints=np.concatenate([xy, conf], axis=-1),
        objects=objects,
        person_mask=np.ones(n, dtype=bool),
        object_mask=np.ones(e, dtype=bool),
        group_label=group_label,
        individual_labels=rng.integers(0, n_classes, size=n).astype(np.int64),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    yield


ACCEPTANCE = []


def record_acceptance(name: str, ok: bool, detail: str = "") -> None:
    ACCEPTANCE.append((name, ok, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
