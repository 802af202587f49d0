"""Loss, Adam training loop, evaluation metrics, checkpoints and ablation runs."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import ModelConfig, TrainConfig
from .features import ClipFeatures, collate, featurize
from .model import DynamicFormer
from .scene import Clip, LabelSpace

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "dynamicformer-checkpoint/1"
LOG_FIELDS = ("epoch", "split", "group_acc", "indiv_acc", "loss")

ABLATION_SUITES = {
    "composition": ("composition", ("baseline", "spatial_only", "sum", "unembed", "full"), "composition3"),
    "interaction": ("interaction", ("none_ball", "none_trans", "erase", "full"), "interaction2"),
    "integration": ("integration", ("linear", "parallel", "hierarchical"), "interaction2"),
}


class TrainingError(RuntimeError):
    pass


def loss_fn(group_logits: torch.Tensor, indiv_logits: torch.Tensor, group_labels: torch.Tensor,
            indiv_labels: torch.Tensor, person_mask: torch.Tensor, indiv_weight: float = 1.0
            ) -> torch.Tensor:
    """Group cross-entropy + weight * mean individual cross-entropy over valid persons."""
    c = group_logits.shape[-1]
    if torch.any((group_labels < 0) | (group_labels >= c)):
        raise ValueError(f"group label outside [0, {c})")
    loss = F.cross_entropy(group_logits, group_labels)
    ci = indiv_logits.shape[-1]
    if indiv_weight == 0 or ci == 0:
        return loss
    valid = person_mask & (indiv_labels >= 0)
    if torch.any(indiv_labels[valid] >= ci):
        raise ValueError(f"individual label outside [0, {ci})")
    if not bool(valid.any()):
        return loss
    indiv = F.cross_entropy(indiv_logits[valid], indiv_labels[valid])
    return loss + indiv_weight * indiv


@dataclass
class Metrics:
    group_accuracy: float
    indiv_accuracy: float
    per_class_accuracy: np.ndarray
    confusion: np.ndarray            # rows: true class, columns: predicted
    loss: float = float("nan")

    @classmethod
    def from_predictions(cls, group_true, group_pred, indiv_true, indiv_pred, num_classes: int,
                         loss: float = float("nan")) -> "Metrics":
        group_true = np.asarray(group_true, dtype=np.int64)
        group_pred = np.asarray(group_pred, dtype=np.int64)
        confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(confusion, (group_true, group_pred), 1)
        counts = confusion.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            per_class = np.where(counts > 0, np.diag(confusion) / counts, np.nan)
        indiv_true = np.asarray(indiv_true, dtype=np.int64)
        indiv_pred = np.asarray(indiv_pred, dtype=np.int64)
        indiv_acc = float((indiv_true == indiv_pred).mean()) if indiv_true.size else float("nan")
        group_acc = float((group_true == group_pred).mean()) if group_true.size else float("nan")
        return cls(group_acc, indiv_acc, per_class, confusion, loss)


def _batches(items, batch_size, order=None):
    order = np.arange(len(items)) if order is None else order
    for start in range(0, len(order), batch_size):
        yield [items[i] for i in order[start:start + batch_size]]


def _dtype(precision: str):
    return torch.float64 if precision == "float64" else torch.float32


def prepare(clips: list[Clip], config: ModelConfig) -> list[ClipFeatures]:
    return [featurize(c, config) for c in clips]


@torch.no_grad()
def predict(model: DynamicFormer, items: list[ClipFeatures], batch_size: int = 64,
            indiv_weight: float = 1.0) -> tuple[Metrics, list[dict]]:
    model.eval()
    dtype = next(model.parameters()).dtype
    gt, gp, it, ip, outputs = [], [], [], [], []
    total, count = 0.0, 0
    for chunk in _batches(items, batch_size):
        batch = collate(chunk, dtype)
        out = model(batch)
        loss = loss_fn(out["group_logits"], out["indiv_logits"], batch["group_label"],
                       batch["individual_labels"], batch["person_mask"], indiv_weight)
        total += loss.item() * len(chunk)
        count += len(chunk)
        gt.append(batch["group_label"].numpy())
        gp.append(out["group_logits"].argmax(-1).numpy())
        if out["indiv_logits"].shape[-1]:
            valid = batch["person_mask"] & (batch["individual_labels"] >= 0)
            it.append(batch["individual_labels"][valid].numpy())
            ip.append(out["indiv_logits"].argmax(-1)[valid].numpy())
        outputs.append(out)
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0, dtype=np.int64)
    metrics = Metrics.from_predictions(cat(gt), cat(gp), cat(it), cat(ip),
                                       model.config.num_group_classes, total / max(count, 1))
    return metrics, outputs


def save_checkpoint(path: str | Path, model: DynamicFormer, labels: LabelSpace,
                    train_config: TrainConfig | None = None, epoch: int | None = None) -> None:
    state = {k: v.detach().cpu() for k, v in model.state_dict().items()}
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "model_config": dataclasses.asdict(model.config),
        "train_config": None if train_config is None else dataclasses.asdict(train_config),
        "labels": labels.to_dict(),
        "epoch": epoch,
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
        "parameter_shapes": {k: list(v.shape) for k, v in state.items()},
        "state_dict": state,
    }, path)


def load_checkpoint(path: str | Path) -> tuple[DynamicFormer, LabelSpace, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    config = ModelConfig(**blob["model_config"])
    model = DynamicFormer(config)
    if blob.get("dtype") == "float64":
        model = model.double()
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, LabelSpace.from_dict(blob["labels"]), blob


def check_compatible(model: DynamicFormer, config: ModelConfig) -> None:
    a, b = dataclasses.asdict(model.config), dataclasses.asdict(config)
    diff = {k for k in a if a[k] != b[k]}
    if diff:
        raise ValueError(f"checkpoint config mismatch in {sorted(diff)}")


def evaluate(clips: list[Clip], checkpoint: str | Path | DynamicFormer,
             config: ModelConfig | None = None, batch_size: int = 64) -> Metrics:
    """Metrics over ``clips`` with dropout off. ``config`` if given must match the checkpoint."""
    model = checkpoint if isinstance(checkpoint, DynamicFormer) else load_checkpoint(checkpoint)[0]
    if config is not None:
        check_compatible(model, config)
    metrics, _ = predict(model, prepare(clips, model.config), batch_size)
    return metrics


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else repr(float(x))


def write_metric_log(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (_fmt(r[k]) if isinstance(r[k], float) else r[k]) for k in LOG_FIELDS})


def train(clips: list[Clip], model_config: ModelConfig, train_config: TrainConfig,
          labels: LabelSpace, test_clips: list[Clip] | None = None,
          out_dir: str | Path | None = None) -> tuple[DynamicFormer, list[dict]]:
    """Adam training; returns the model and the per-epoch metric log rows.

    Each epoch appends a ``train`` row (running loss/accuracy of the epoch's
    updates) and, with ``test_clips``, a ``test`` row from an eval-mode pass.
    With ``out_dir`` the checkpoint and ``metric_log.csv`` are rewritten after
    every epoch.
    """
    if not clips:
        raise ValueError("empty training set")
    if len(labels.group_classes) != model_config.num_group_classes:
        raise ValueError("label space and model config disagree on group classes")
    tc = train_config
    seed_everything(tc.seed)
    dtype = _dtype(tc.precision)
    model = DynamicFormer(model_config).to(dtype)
    opt = torch.optim.Adam(model.parameters(), lr=tc.lr, betas=(0.9, 0.999), eps=1e-8,
                           weight_decay=tc.weight_decay)
    steps_per_epoch = math.ceil(len(clips) / tc.batch_size)
    sched = None
    if tc.lr_schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(tc.epochs * steps_per_epoch, 1))
    items = prepare(clips, model_config)
    test_items = prepare(test_clips, model_config) if test_clips else None
    shuffle = np.random.default_rng(tc.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rows = []
    for epoch in range(1, tc.epochs + 1):
        model.train()
        total, correct, seen, icorrect, iseen = 0.0, 0, 0, 0, 0
        for step, chunk in enumerate(_batches(items, tc.batch_size, shuffle.permutation(len(items)))):
            batch = collate(chunk, dtype)
            res = model(batch)
            loss = loss_fn(res["group_logits"], res["indiv_logits"], batch["group_label"],
                           batch["individual_labels"], batch["person_mask"], tc.indiv_weight)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss.item()} at epoch {epoch}, step {step}; "
                                    f"lr={tc.lr}, batch of {len(chunk)} clips")
            opt.zero_grad()
            loss.backward()
            if tc.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
            opt.step()
            if sched is not None:
                sched.step()
            total += loss.item() * len(chunk)
            seen += len(chunk)
            correct += int((res["group_logits"].argmax(-1) == batch["group_label"]).sum())
            if res["indiv_logits"].shape[-1]:
                valid = batch["person_mask"] & (batch["individual_labels"] >= 0)
                icorrect += int((res["indiv_logits"].argmax(-1)[valid] == batch["individual_labels"][valid]).sum())
                iseen += int(valid.sum())
        rows.append({"epoch": epoch, "split": "train", "group_acc": correct / seen,
                     "indiv_acc": icorrect / iseen if iseen else float("nan"), "loss": total / seen})
        if test_items:
            m, _ = predict(model, test_items, tc.batch_size, tc.indiv_weight)
            rows.append({"epoch": epoch, "split": "test", "group_acc": m.group_accuracy,
                         "indiv_acc": m.indiv_accuracy, "loss": m.loss})
        log.info("epoch %d: %s", epoch, rows[-1])
        if out is not None:
            save_checkpoint(out / "checkpoint.pt", model, labels, tc, epoch)
            if tc.keep_epoch_checkpoints:
                save_checkpoint(out / f"checkpoint_epoch{epoch:03d}.pt", model, labels, tc, epoch)
            write_metric_log(rows, out / "metric_log.csv")
    model.eval()
    return model, rows


def write_confusion(metrics: Metrics, labels: LabelSpace, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred", *labels.group_classes])
        for name, row in zip(labels.group_classes, metrics.confusion):
            w.writerow([name, *(int(v) for v in row)])


def write_metrics(metrics: Metrics, labels: LabelSpace, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerow(["group_acc", _fmt(metrics.group_accuracy)])
        w.writerow(["indiv_acc", _fmt(metrics.indiv_accuracy)])
        w.writerow(["loss", _fmt(metrics.loss)])
        for name, acc in zip(labels.group_classes, metrics.per_class_accuracy):
            w.writerow([f"class_acc:{name}", _fmt(acc)])


def plot_per_class(metrics: Metrics, labels: LabelSpace, path: str | Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(1 + 0.8 * len(labels.group_classes), 3))
    ax.bar(labels.group_classes, np.nan_to_num(metrics.per_class_accuracy) * 100)
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.tick_params(axis="x", rotation=45)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def run_ablation(suite: str, model_config: ModelConfig | None = None,
                 train_config: TrainConfig | None = None, seed: int = 0,
                 n_train: int = 300, n_test: int = 100,
                 data: tuple[list[Clip], list[Clip]] | None = None) -> list[dict]:
    """Train every variant of one ablation axis on the same data and seed.

    Returns one row per variant: suite, variant, benchmark, group_acc, indiv_acc.
    """
    from . import synthetic

    if suite not in ABLATION_SUITES:
        raise ValueError(f"unknown ablation suite {suite!r}; expected one of {sorted(ABLATION_SUITES)}")
    field, variants, bench = ABLATION_SUITES[suite]
    labels = synthetic.label_space(bench)
    base = (model_config or ModelConfig.micro()).replace(num_group_classes=len(labels.group_classes),
                                                          num_indiv_classes=len(labels.individual_classes))
    tc = (train_config or TrainConfig()).replace(seed=seed)
    if data is None:
        data = synthetic.benchmark_suite(bench, seed, n_train, n_test, base.max_persons, base.num_frames)
    train_clips, test_clips = data
    rows = []
    for variant in variants:
        cfg = base.replace(**{field: variant})
        model, _ = train(train_clips, cfg, tc, labels)
        m = evaluate(test_clips, model)
        rows.append({"suite": suite, "variant": variant, "benchmark": bench,
                     "group_acc": m.group_accuracy, "indiv_acc": m.indiv_accuracy})
        log.info("ablation %s/%s: %.3f", suite, variant, m.group_accuracy)
    return rows
