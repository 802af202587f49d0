"""Command-line entry point: dynamicformer {generate|train|eval|ablate|inspect}."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import synthetic
from .config import ModelConfig, config_text, load_config, variant_overrides
from .dim import importance_scores
from .features import collate, featurize
from .scene import LabelSpace, load_clip, save_clip
from .training import (ABLATION_SUITES, check_compatible, evaluate, load_checkpoint,
                       plot_per_class, run_ablation, save_checkpoint, train, write_confusion,
                       write_metric_log, write_metrics)

log = logging.getLogger("dynamicformer")

SUITE_MANIFEST = "suite.json"
RUN_MANIFEST = "run_manifest.json"
# checksums skip images: their bytes depend on the plotting backend version
UNCHECKED_SUFFIXES = (".png",)


class CommandError(Exception):
    pass


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_run_manifest(out: Path, command: str, args: argparse.Namespace, config: dict | None,
                       inputs: list[str], outputs: list[Path], started: float) -> Path:
    outputs = sorted(set(outputs))
    for p in outputs:
        if not p.is_file():
            raise CommandError(f"expected output {p} was not written")
    manifest = {
        "command": command,
        "argv": {k: v for k, v in vars(args).items() if k != "func"},
        "config": config,
        "seed": getattr(args, "seed", None),
        "inputs": inputs,
        "outputs": [str(p.relative_to(out)) for p in outputs],
        "wall_clock_s": round(time.time() - started, 3),
        "checksums": {str(p.relative_to(out)): sha256(p) for p in outputs
                      if p.suffix not in UNCHECKED_SUFFIXES},
    }
    path = out / RUN_MANIFEST
    _write_atomic(path, json.dumps(manifest, indent=2, default=str) + "\n")
    return path


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise CommandError(f"cannot write to {out}: {e}") from e
    return out


def load_suite(data: str) -> tuple[dict, LabelSpace]:
    root = Path(data)
    if not root.is_dir():
        raise CommandError(f"data directory {root} does not exist")
    path = root / SUITE_MANIFEST
    if not path.is_file():
        raise CommandError(f"{root} has no {SUITE_MANIFEST}; create one with `dynamicformer generate`")
    doc = json.loads(path.read_text())
    return doc, LabelSpace.from_dict(doc["labels"])


def suite_clips(data: str, split: str, labels: LabelSpace, doc: dict) -> list:
    root = Path(data)
    clips = [load_clip(root / e["path"], labels) for e in doc["clips"] if e["split"] == split]
    if not clips:
        raise CommandError(f"no {split} clips listed in {root / SUITE_MANIFEST}")
    return clips


def _configs(args, labels: LabelSpace | None = None):
    try:
        model, tc = load_config(args.config)
    except (OSError, ValueError, TypeError) as e:
        raise CommandError(f"config {args.config}: {e}") from e
    if labels is not None:
        model = model.replace(num_group_classes=len(labels.group_classes),
                              num_indiv_classes=len(labels.individual_classes))
    if getattr(args, "variant", None):
        try:
            model = model.replace(**variant_overrides(args.variant))
        except ValueError as e:
            raise CommandError(str(e)) from e
    if args.seed is not None:
        tc = tc.replace(seed=args.seed)
    if getattr(args, "epochs", None) is not None:
        tc = tc.replace(epochs=args.epochs)
    return model, tc


def cmd_generate(args) -> int:
    started = time.time()
    if args.suite not in synthetic.SUITES:
        raise CommandError(f"unknown suite {args.suite!r}; choose from {sorted(synthetic.SUITES)}")
    model, _ = _configs(args)
    out = _out_dir(args.out)
    seed = 0 if args.seed is None else args.seed
    labels = synthetic.label_space(args.suite)
    tr, te = synthetic.benchmark_suite(args.suite, seed, args.n_train, args.n_test,
                                       model.max_persons, model.num_frames)
    entries, written = [], []
    for split, clips in (("train", tr), ("test", te)):
        (out / split).mkdir(exist_ok=True)
        for i, clip in enumerate(clips):
            rel = f"{split}/clip_{i:05d}.json"
            save_clip(clip, out / rel, labels)
            entries.append({"path": rel, "split": split, "group_label": labels.group_classes[clip.group_label]})
            written.append(out / rel)
    suite_doc = {"suite": args.suite, "seed": seed, "labels": labels.to_dict(), "clips": entries}
    _write_atomic(out / SUITE_MANIFEST, json.dumps(suite_doc, indent=2) + "\n")
    written.append(out / SUITE_MANIFEST)
    write_run_manifest(out, "generate", args, None, [], written, started)
    print(f"wrote {len(entries)} clips to {out}")
    return 0


def cmd_train(args) -> int:
    started = time.time()
    doc, labels = load_suite(args.data)
    model_cfg, tc = _configs(args, labels)
    tr = suite_clips(args.data, "train", labels, doc)
    te = [] if args.no_test else suite_clips(args.data, "test", labels, doc)
    out = _out_dir(args.out)
    (out / "config.txt").write_text(config_text(model_cfg, tc))
    model, rows = train(tr, model_cfg, tc, labels, te or None, out)
    if tc.epochs == 0:
        save_checkpoint(out / "checkpoint.pt", model, labels, tc, 0)
        write_metric_log(rows, out / "metric_log.csv")
    outputs = [out / "config.txt", out / "checkpoint.pt", out / "metric_log.csv"]
    outputs += sorted(out.glob("checkpoint_epoch*.pt"))
    write_run_manifest(out, "train", args, {"model": dataclasses.asdict(model_cfg),
                                            "train": dataclasses.asdict(tc)},
                       [str(Path(args.data) / SUITE_MANIFEST)], outputs, started)
    final = [r for r in rows if r["split"] == ("train" if args.no_test else "test")]
    if final:
        print(f"epoch {final[-1]['epoch']}: group_acc {final[-1]['group_acc']:.4f}")
    return 0


def cmd_eval(args) -> int:
    started = time.time()
    if not Path(args.checkpoint).is_file():
        raise CommandError(f"checkpoint {args.checkpoint} not found")
    model, ck_labels, _ = load_checkpoint(args.checkpoint)
    doc, labels = load_suite(args.data)
    if labels.to_dict() != ck_labels.to_dict():
        raise CommandError("checkpoint label space does not match the data suite")
    if args.config is not None:
        cfg, _ = _configs(args, labels)
        try:
            check_compatible(model, cfg)
        except ValueError as e:
            raise CommandError(f"incompatible checkpoint: {e}") from e
    clips = suite_clips(args.data, args.split, labels, doc)
    metrics = evaluate(clips, model)
    out = _out_dir(args.out)
    write_metrics(metrics, labels, out / "metrics.csv")
    write_confusion(metrics, labels, out / "confusion.csv")
    outputs = [out / "metrics.csv", out / "confusion.csv"]
    if args.plot:
        plot_per_class(metrics, labels, out / "per_class_accuracy.png")
        outputs.append(out / "per_class_accuracy.png")
    write_run_manifest(out, "eval", args, dataclasses.asdict(model.config),
                       [args.checkpoint, str(Path(args.data) / SUITE_MANIFEST)], outputs, started)
    print(f"group_acc {metrics.group_accuracy:.4f} indiv_acc {metrics.indiv_accuracy:.4f}")
    return 0


ABLATION_TITLES = {"composition": "composition manners", "interaction": "interaction manners",
                   "integration": "integration orders"}


def ablation_table(rows: list[dict]) -> str:
    """Markdown with one block per ablation axis and one row per manner."""
    lines = []
    for suite in ABLATION_SUITES:
        block = [r for r in rows if r["suite"] == suite]
        if not block:
            continue
        lines += [f"### {ABLATION_TITLES[suite]} ({block[0]['benchmark']})", "",
                  "| manner | group acc (%) | individual acc (%) |", "|---|---|---|"]
        lines += [f"| {r['variant']} | {100 * r['group_acc']:.1f} | {100 * r['indiv_acc']:.1f} |"
                  for r in block]
        lines.append("")
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    started = time.time()
    suites = list(ABLATION_SUITES) if args.suite == "all" else [args.suite]
    for s in suites:
        if s not in ABLATION_SUITES:
            raise CommandError(f"unknown ablation suite {s!r}; choose from {sorted(ABLATION_SUITES)} or all")
    model_cfg, tc = _configs(args)
    out = _out_dir(args.out)
    seed = tc.seed
    rows, cache = [], {}
    for s in suites:
        bench = ABLATION_SUITES[s][2]
        if bench not in cache:
            cache[bench] = synthetic.benchmark_suite(bench, seed, args.n_train, args.n_test,
                                                     model_cfg.max_persons, model_cfg.num_frames)
        rows += run_ablation(s, model_cfg, tc, seed, data=cache[bench])
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["suite", "variant", "benchmark", "group_acc", "indiv_acc"],
                           lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "group_acc": repr(r["group_acc"]), "indiv_acc": repr(r["indiv_acc"])})
    (out / "ablation.md").write_text(ablation_table(rows))
    write_run_manifest(out, "ablate", args, {"model": dataclasses.asdict(model_cfg),
                                             "train": dataclasses.asdict(tc)},
                       [], [out / "ablation.csv", out / "ablation.md"], started)
    print(ablation_table(rows))
    return 0


def _heatmap(matrix: np.ndarray, path: Path, title: str, vmax: float | None = None) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(3.2, 3))
    im = ax.imshow(matrix, vmin=0.0, vmax=vmax, cmap="viridis")
    ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


@torch.no_grad()
def inspect_clip(model, clip) -> dict[str, np.ndarray]:
    """Importance scores, adjacency series and relation norms for one clip."""
    model.eval()
    dtype = next(model.parameters()).dtype
    batch = collate([featurize(clip, model.config)], dtype)
    res = model(batch)
    n = clip.num_persons
    pm = batch["person_mask"][0].numpy()
    valid_persons = np.flatnonzero(pm)
    out = {"persons": valid_persons,
           "relation_norm": res["relation"][0].norm(dim=-1).numpy()[np.ix_(valid_persons, valid_persons)]}
    if res["adjacency"] is None:
        out["importance"] = np.zeros(len(valid_persons))
        out["adjacency"] = None
        return out
    A = res["adjacency"]
    node_mask = res["node_mask"]
    num_slots = batch["person_mask"].shape[1]
    scores = importance_scores(A, node_mask, num_slots)[0].numpy()
    nodes = np.flatnonzero(node_mask[0].numpy())
    out["importance"] = scores[valid_persons]
    out["adjacency"] = A[0].numpy()[:, nodes[:, None], nodes[None, :]]
    out["nodes"] = nodes
    out["num_persons"] = n
    return out


def cmd_inspect(args) -> int:
    started = time.time()
    if not Path(args.checkpoint).is_file():
        raise CommandError(f"checkpoint {args.checkpoint} not found")
    if not Path(args.clip).is_file():
        raise CommandError(f"clip {args.clip} not found")
    model, labels, _ = load_checkpoint(args.checkpoint)
    clip = load_clip(args.clip, labels, model.config)
    info = inspect_clip(model, clip)
    out = _out_dir(args.out)
    outputs = [out / "importance.csv", out / "relation_norm.csv", out / "relation_norm.png"]
    with open(out / "importance.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["person", "score"])
        for p, s in zip(info["persons"], info["importance"]):
            w.writerow([int(p), repr(float(s))])
    np.savetxt(out / "relation_norm.csv", info["relation_norm"], delimiter=",", fmt="%.17g")
    _heatmap(info["relation_norm"], out / "relation_norm.png", "relation norm")
    if info["adjacency"] is not None:
        with open(out / "adjacency.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["frame", "row", "col", "weight"])
            for t, At in enumerate(info["adjacency"]):
                for i, a in enumerate(info["nodes"]):
                    for j, b in enumerate(info["nodes"]):
                        w.writerow([t, int(a), int(b), repr(float(At[i, j]))])
        outputs.append(out / "adjacency.csv")
        for t, At in enumerate(info["adjacency"]):
            path = out / f"adjacency_frame{t:02d}.png"
            _heatmap(At, path, f"adjacency, frame {t}", vmax=1.0)
            outputs.append(path)
    write_run_manifest(out, "inspect", args, dataclasses.asdict(model.config),
                       [args.checkpoint, args.clip], outputs, started)
    if len(info["importance"]) and info["adjacency"] is not None:
        print(f"most important person: {int(info['persons'][int(np.argmax(info['importance']))])}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynamicformer",
                                     description="Keypoint-only group activity recognition.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, out=True):
        p.add_argument("--config", help="flat key = value config file (defaults: micro preset)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        if data:
            p.add_argument("--data", required=True, help="suite directory written by generate")
        if out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("generate", help="write a synthetic benchmark suite")
    common(p, data=False)
    p.add_argument("--suite", required=True, help=f"one of {', '.join(synthetic.SUITES)}")
    p.add_argument("--n-train", type=int, default=300)
    p.add_argument("--n-test", type=int, default=100)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on a suite")
    common(p)
    p.add_argument("--variant", help="module variant, e.g. erase, sum, parallel")
    p.add_argument("--epochs", type=int)
    p.add_argument("--no-test", action="store_true", help="skip per-epoch test evaluation")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--variant", help="with --config, the variant the checkpoint must match")
    p.add_argument("--plot", action="store_true", help="also write a per-class accuracy bar chart")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train every manner of one ablation axis")
    common(p, data=False)
    p.add_argument("--suite", required=True, help=f"one of {', '.join(ABLATION_SUITES)}, or all")
    p.add_argument("--n-train", type=int, default=300)
    p.add_argument("--n-test", type=int, default=100)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect", help="importance scores and adjacency maps for one clip")
    common(p, data=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip", required=True, help="clip JSON file")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CommandError as e:
        parser.print_usage(sys.stderr)
        print(f"dynamicformer {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError) as e:
        print(f"dynamicformer {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
