"""Command-line pipeline: synth | train | eval | gradcheck | report.

Every subcommand is deterministic given its flags and seed. A plain-text
``key = value`` config file can preset any training option; explicit flags
win over config-file values. Artifacts land in the directory given by
``--out`` (default: ``runs/<timestamp>-seed<seed>`` for training).
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import time
from pathlib import Path

import numpy as np

from . import checks, metrics, trainer
from .data import read_annotations, synth_generate, write_annotations
from .heatmaps import decode_maps, encode_gaussian, write_pgm
from .skeleton import lsp_14, mpii_16
from .trainer import TrainConfig, train_loop

_SKELETONS = {"mpii16": mpii_16, "lsp14": lsp_14}


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 2


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; '#' starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    if args.count < 1:
        return _fail("--count must be >= 1")
    if not 0.0 <= args.occlusion <= 1.0:
        return _fail("--occlusion must lie in [0, 1]")
    skeleton = _SKELETONS[args.skeleton]()
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        return _fail(f"output path not writable: {e}")

    # disjoint seed lanes for the two splits
    train = synth_generate(args.seed, args.count, skeleton, args.image_size, args.occlusion)
    val = synth_generate(args.seed + 1_000_000, args.val_count, skeleton, args.image_size, args.occlusion)
    write_annotations(train, out / "train.txt", images=args.images)
    write_annotations(val, out / "val.txt", images=args.images)

    def occ_stats(ds):
        vis = np.stack([s.vis for s in ds.samples])
        return 1.0 - vis.mean()

    print(f"wrote {len(train.samples)} train samples to {out / 'train.txt'}")
    print(f"wrote {len(val.samples)} val samples to {out / 'val.txt'}")
    print(f"occlusion fraction: train {occ_stats(train):.4f}, val {occ_stats(val):.4f}")
    return 0


# ---------------------------------------------------------------------------
# train


def _config_from_args(args) -> TrainConfig:
    mapping = {}
    if args.config:
        mapping.update(read_config_file(args.config))
    field_names = {f.name for f in dataclasses.fields(TrainConfig)}
    for key, value in vars(args).items():
        # store_true flags can't distinguish "absent" from False; handled below
        if key in field_names and key != "augment" and value is not None:
            mapping[key] = value
    if args.no_cfn:
        mapping["lateral"] = False
    if args.augment:
        mapping["augment"] = True
    return TrainConfig.from_mapping(mapping)


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    train_path = data_dir / "train.txt"
    val_path = data_dir / "val.txt"
    if not train_path.exists() or not val_path.exists():
        return _fail(f"dataset not found under {data_dir} (need train.txt and val.txt)")
    try:
        cfg = _config_from_args(args)
    except ValueError as e:
        return _fail(str(e))
    train_set = read_annotations(train_path)
    val_set = read_annotations(val_path)

    out = Path(args.out) if args.out else Path("runs") / f"{time.strftime('%Y%m%d-%H%M%S')}-seed{cfg.seed}"

    def progress(epoch, lr, val_pck):
        print(f"epoch {epoch:3d}  lr {lr:.6f}  val PCK@{cfg.eval_threshold} {val_pck:.4f}")

    if args.alpha_sweep:
        alphas = [float(a) for a in args.alpha_sweep.replace(",", " ").split()]
        out.mkdir(parents=True, exist_ok=True)
        rows = trainer.alpha_sweep(train_set, val_set, cfg, alphas, out_csv=out / "alpha_sweep.csv")
        for a, p in rows:
            print(f"alpha {a:g}: final val PCK {p:.4f}")
        print(f"wrote {out / 'alpha_sweep.csv'}")
        return 0

    try:
        train_loop(train_set, val_set, cfg, run_dir=out, resume=args.resume, progress=progress)
    except trainer.TrainingError as e:
        return _fail(str(e))
    print(f"run artifacts in {out}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _dataset_skeleton_matches(meta, skeleton) -> bool:
    sk = meta.get("skeleton")
    return (
        sk is not None
        and sk["n_nodes"] == skeleton.n_nodes
        and tuple(sk["names"]) == skeleton.names
        and tuple(tuple(e) for e in sk["edges"]) == skeleton.edges
    )


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint) if args.checkpoint else None
    data_path = Path(args.data)
    if not data_path.exists():
        return _fail(f"dataset file not found: {data_path}")
    dataset = read_annotations(data_path)
    sk = dataset.skeleton
    if args.flip_test and not sk.flip_pairs:
        return _fail("flip test requested but the dataset skeleton defines no flip pairs")

    gts = np.stack([s.joints for s in dataset.samples])
    vis = np.stack([s.vis for s in dataset.samples])
    scales = np.array([s.person_scale for s in dataset.samples])
    heads = np.array([s.head_size for s in dataset.samples])

    gen = None
    if args.oracle:
        # ground-truth-encoded heatmaps stand in for predictions
        hm = dataset.image_size // dataset.stride
        preds = np.zeros_like(gts)
        for i, s in enumerate(dataset.samples):
            enc = encode_gaussian(s.joints, np.ones_like(s.vis), sk.n_nodes, hm, dataset.stride)
            preds[i] = decode_maps(enc.values.data, dataset.stride)[:, :2]
    else:
        if ckpt is None or not ckpt.exists():
            return _fail("checkpoint not found (pass --checkpoint or use --oracle)")
        gen, _, meta = trainer.load_models(ckpt)
        if not _dataset_skeleton_matches(meta, sk):
            return _fail("checkpoint skeleton does not match the dataset skeleton")
        preds = trainer.predict_coords(gen, dataset, flip_test=args.flip_test)

    rows = {
        f"PCK@{args.pck_threshold}": metrics.pck(gts=gts, preds=preds, vis=vis, normalizers=scales, threshold=args.pck_threshold),
        "PCKh@0.5": metrics.pckh(preds, gts, vis, heads),
    }
    for m in args.subset_min_invisible:
        rows[f"PCKh@0.5 (>={m} invisible)"] = metrics.occlusion_report(preds, gts, vis, heads, m)
    k = metrics.default_joint_k(sk.names)
    ap = metrics.oks_ap(preds, gts, vis, scales, k)

    out = Path(args.out) if args.out else data_path.parent
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_report_csv(out / "eval_report.csv", rows, sk.names)
    metrics.write_report_json(out / "eval_report.json", rows, sk.names, extra={"oks_ap": ap})

    for label, result in rows.items():
        mean = "nan" if np.isnan(result.mean) else f"{result.mean:.4f}"
        print(f"{label}: mean {mean} over {result.n_samples} samples")
    print(f"OKS-AP: {ap:.4f}")

    if args.dump_heatmaps and gen is not None:
        dump_dir = out / "heatmaps"
        dump_dir.mkdir(exist_ok=True)
        maps = trainer.predict_heatmaps(gen, dataset, flip_test=args.flip_test)
        with open(dump_dir / "decoded.csv", "w", encoding="utf-8") as fh:
            fh.write("sample,joint,x,y,confidence\n")
            for i in range(min(args.dump_heatmaps, len(dataset.samples))):
                decoded = decode_maps(maps[i], dataset.stride)
                for j in range(sk.n_nodes):
                    write_pgm(dump_dir / f"sample{i:04d}_joint{j:02d}.pgm", np.clip(maps[i, j], 0.0, 1.0))
                    fh.write(f"{i},{j},{decoded[j,0]!r},{decoded[j,1]!r},{decoded[j,2]!r}\n")
        print(f"heatmap dumps in {dump_dir}")
    print(f"reports in {out}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    worst_overall = 0.0
    failures = 0
    for name, fn in checks.suite_items():
        err = fn(args.eps)
        worst_overall = max(worst_overall, err)
        status = "pass" if err < checks.SUITE_TOLERANCE else "FAIL"
        if status == "FAIL":
            failures += 1
        print(f"{status}  {name:32s} max relative error {err:.3e}")
    print(f"{len(checks.suite_items())} checks, worst error {worst_overall:.3e}, tolerance {checks.SUITE_TOLERANCE:g}")
    return 0 if failures == 0 else 1


# ---------------------------------------------------------------------------
# report


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    steps_csv = run_dir / "train_log.csv"
    epochs_csv = run_dir / "val_log.csv"
    if not steps_csv.exists() or not epochs_csv.exists():
        return _fail(f"no training logs found under {run_dir}")
    log = trainer.TrainLog.read_csv(steps_csv, epochs_csv)
    g_steps = sum(1 for s in log.steps if s.kind == "G")
    d_steps = sum(1 for s in log.steps if s.kind == "D")
    lines = [
        f"run directory: {run_dir}",
        f"optimizer steps: {len(log.steps)} (G {g_steps}, D {d_steps})",
        f"epochs: {len(log.epochs)}",
    ]
    if log.epochs:
        best = max(log.epochs, key=lambda e: e.val_pck)
        lines.append(f"final val PCK: {log.epochs[-1].val_pck:.4f} (best {best.val_pck:.4f} at epoch {best.epoch})")
        lines.append(f"final lr: {log.epochs[-1].lr:g}")
    sweep = run_dir / "alpha_sweep.csv"
    if sweep.exists():
        lines.append("alpha sweep:")
        lines.extend("  " + line for line in sweep.read_text(encoding="utf-8").strip().splitlines())
    eval_csv = run_dir / "eval_report.csv"
    if eval_csv.exists():
        lines.append("evaluation:")
        lines.extend("  " + line for line in eval_csv.read_text(encoding="utf-8").strip().splitlines())
    text = "\n".join(lines)
    print(text)
    (run_dir / "report.txt").write_text(text + "\n", encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posegan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic train/val annotation files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, required=True, help="number of training samples")
    p.add_argument("--val-count", type=int, default=200)
    p.add_argument("--occlusion", type=float, default=0.0, help="per-joint occlusion probability")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skeleton", choices=sorted(_SKELETONS), default="mpii16")
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--images", choices=("inline", "external"), default="inline")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the generator (and discriminator)")
    p.add_argument("--data", required=True, help="directory containing train.txt and val.txt")
    p.add_argument("--out", help="run directory (default: runs/<timestamp>-seed<seed>)")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--resume", action="store_true", help="continue from the newest checkpoint in --out")
    p.add_argument("--no-cfn", action="store_true", help="disable the lateral skip connection (ablation)")
    p.add_argument("--augment", action="store_true", help="enable flip/rotation/scale augmentation")
    p.add_argument("--alpha-sweep", help="comma-separated alphas; runs one training per value")
    for name, typ in (
        ("alpha", float), ("lr", float), ("batch-size", int), ("max-epochs", int),
        ("g-steps-per-d", int), ("seed", int), ("sigma", float), ("ggnn-steps", int),
        ("hidden-dim", int), ("eval-threshold", float),
    ):
        p.add_argument(f"--{name}", type=typ, default=None)
    p.add_argument("--lr-drop-epochs", default=None, help="comma-separated epoch numbers")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on an annotation file")
    p.add_argument("--checkpoint", help="checkpoint file (final.ckpt of a run)")
    p.add_argument("--data", required=True, help="annotation file to evaluate on")
    p.add_argument("--out", help="report directory (default: beside the data file)")
    p.add_argument("--flip-test", action="store_true", help="average original and mirrored predictions")
    p.add_argument("--oracle", action="store_true", help="score ground-truth-encoded heatmaps instead of a model")
    p.add_argument("--pck-threshold", type=float, default=0.2)
    p.add_argument("--subset-min-invisible", type=int, nargs="*", default=[2, 4])
    p.add_argument("--dump-heatmaps", type=int, default=0, help="dump PGM heatmaps for the first N samples")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the gradient verification suite")
    p.add_argument("--eps", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="summarize a run directory")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        return _fail(str(e))


if __name__ == "__main__":
    sys.exit(main())
