"""Alternating adversarial training of the heatmap generator.

The loop interleaves ``g_steps_per_d`` generator updates with one
discriminator update (default 3:1), tracked by a global counter so the
G,G,G,D pattern is exact across epoch boundaries. Generator steps minimize
``L_heatmap + alpha * L_adversarial``; discriminator steps minimize BCE on
ground-truth heatmaps (real) versus current generator outputs (fake,
detached). With ``alpha = 0`` the loop takes a discriminator-free path: no
discriminator is built and no D steps run, so such runs are bit-identical
to plain L2 training under the same seed.

Determinism: model initialization, epoch shuffling, and augmentation each
draw from their own seed streams derived from ``(seed, stream tag)`` or
``(seed, stream tag, epoch)``, so runs are reproducible bit-for-bit and a
resumed run continues exactly where the interrupted one left off.
The learning rate is divided by 10 at each configured drop epoch.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor, backward, load_checkpoint, save_checkpoint, zero_grads
from .data import PoseDataset, augment
from .heatmaps import encode_gaussian
from .metrics import pck
from .models import (
    CascadeGenerator,
    GraphDiscriminator,
    loss_discriminator,
    loss_generator,
    loss_generator_adversarial,
)
from .skeleton import SkeletonGraph

__all__ = [
    "TrainConfig",
    "TrainLog",
    "StepRecord",
    "EpochRecord",
    "TrainingError",
    "train_step_g",
    "train_step_d",
    "train_loop",
    "alpha_sweep",
    "batch_arrays",
    "predict_heatmaps",
    "predict_coords",
    "evaluate_pck",
    "load_models",
]

# stream tags for the independent RNG lanes
_STREAM_GEN = 11
_STREAM_DISC = 22
_STREAM_SHUFFLE = 33
_STREAM_AUGMENT = 44


class TrainingError(RuntimeError):
    """Raised when a training step produces a non-finite loss."""


@dataclass
class TrainConfig:
    alpha: float = 0.01
    lr: float = 1e-3
    lr_drop_epochs: tuple = (20, 27)
    batch_size: int = 16
    max_epochs: int = 30
    g_steps_per_d: int = 3
    seed: int = 0
    sigma: float = 2.0
    ggnn_steps: int = 3
    hidden_dim: int = 64
    lateral: bool = True
    augment: bool = False
    flip_prob: float = 0.5
    max_rotation_deg: float = 30.0
    scale_low: float = 0.75
    scale_high: float = 1.25
    eval_threshold: float = 0.2

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.g_steps_per_d < 1:
            raise ValueError("g_steps_per_d must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for e in self.lr_drop_epochs if epoch >= e)
        return self.lr * (0.1**drops)

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in mapping:
                continue
            raw = mapping[f.name]
            if f.name == "lr_drop_epochs":
                if isinstance(raw, str):
                    raw = tuple(int(x) for x in raw.replace(",", " ").split())
                kwargs[f.name] = tuple(int(x) for x in raw)
            elif f.type == "bool" or isinstance(getattr(cls, f.name), bool):
                kwargs[f.name] = raw if isinstance(raw, bool) else str(raw).lower() in ("1", "true", "yes")
            elif isinstance(getattr(cls, f.name), int):
                kwargs[f.name] = int(raw)
            else:
                kwargs[f.name] = float(raw)
        unknown = set(mapping) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**kwargs)


@dataclass
class StepRecord:
    epoch: int
    step: int
    kind: str                      # "G" or "D"
    loss_g: float | None = None
    loss_adv: float | None = None
    loss_d: float | None = None
    d_real: float | None = None
    d_fake: float | None = None


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    val_pck: float


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def write_csv(self, steps_path, epochs_path) -> None:
        def cell(x):
            return "" if x is None else repr(float(x))

        with open(steps_path, "w", encoding="utf-8") as fh:
            fh.write("epoch,step,kind,loss_g,loss_adv,loss_d,d_real,d_fake\n")
            for r in self.steps:
                fh.write(
                    f"{r.epoch},{r.step},{r.kind},{cell(r.loss_g)},{cell(r.loss_adv)},"
                    f"{cell(r.loss_d)},{cell(r.d_real)},{cell(r.d_fake)}\n"
                )
        with open(epochs_path, "w", encoding="utf-8") as fh:
            fh.write("epoch,lr,val_pck\n")
            for e in self.epochs:
                fh.write(f"{e.epoch},{e.lr!r},{e.val_pck!r}\n")

    @classmethod
    def read_csv(cls, steps_path, epochs_path) -> "TrainLog":
        log = cls()

        def val(x):
            return None if x == "" else float(x)

        with open(steps_path, encoding="utf-8") as fh:
            next(fh)
            for line in fh:
                e, s, kind, lg, la, ld, dr, df = line.rstrip("\n").split(",")
                log.steps.append(StepRecord(int(e), int(s), kind, val(lg), val(la), val(ld), val(dr), val(df)))
        with open(epochs_path, encoding="utf-8") as fh:
            next(fh)
            for line in fh:
                e, lr, p = line.rstrip("\n").split(",")
                log.epochs.append(EpochRecord(int(e), float(lr), float(p)))
        return log


# ---------------------------------------------------------------------------
# batching and inference


def batch_arrays(dataset: PoseDataset, samples, sigma: float):
    """Stack samples into (images, gt heatmaps, visibility) training arrays."""
    hm_size = dataset.image_size // dataset.stride
    n = dataset.skeleton.n_nodes
    images = np.stack([s.image.data for s in samples])
    heatmaps = np.zeros((len(samples), n, hm_size, hm_size))
    vis = np.zeros((len(samples), n))
    for i, s in enumerate(samples):
        heatmaps[i] = encode_gaussian(s.joints, s.vis, n, hm_size, dataset.stride, sigma).values.data
        vis[i] = s.vis
    return Tensor(images), Tensor(heatmaps), vis


def predict_heatmaps(gen: CascadeGenerator, dataset: PoseDataset, batch: int = 32, flip_test: bool = False):
    """Generator heatmaps for every sample, optionally flip-averaged."""
    sk = dataset.skeleton
    if flip_test and not sk.flip_pairs:
        raise ValueError("flip test requires a skeleton with flip pairs")
    fm = sk.flip_map() if flip_test else None
    outs = []
    for start in range(0, len(dataset.samples), batch):
        chunk = dataset.samples[start : start + batch]
        images = np.stack([s.image.data for s in chunk])
        pred = gen.forward(Tensor(images)).data
        if flip_test:
            mirrored = gen.forward(Tensor(np.ascontiguousarray(images[..., ::-1]))).data
            restored = mirrored[:, fm][:, :, :, ::-1]
            pred = 0.5 * (pred + restored)
        outs.append(pred)
    return np.concatenate(outs, axis=0)


def predict_coords(gen: CascadeGenerator, dataset: PoseDataset, batch: int = 32, flip_test: bool = False):
    """Decoded (x, y) predictions for every sample, shape (M, N, 2)."""
    from .heatmaps import decode_maps

    maps = predict_heatmaps(gen, dataset, batch, flip_test)
    coords = np.stack([decode_maps(m, dataset.stride)[:, :2] for m in maps])
    return coords


def evaluate_pck(gen: CascadeGenerator, dataset: PoseDataset, threshold: float = 0.2, flip_test: bool = False) -> float:
    preds = predict_coords(gen, dataset, flip_test=flip_test)
    gts = np.stack([s.joints for s in dataset.samples])
    vis = np.stack([s.vis for s in dataset.samples])
    scales = np.array([s.person_scale for s in dataset.samples])
    return pck(preds, gts, vis, scales, threshold).mean


# ---------------------------------------------------------------------------
# steps


def _require_finite(value: float, what: str, epoch: int, step: int) -> float:
    if not math.isfinite(value):
        raise TrainingError(f"non-finite {what} ({value}) at epoch {epoch}, step {step}")
    return value


def train_step_g(gen, disc, opt_g, images, gt_hm, vis, alpha: float, epoch: int = 0, step: int = 0):
    """One Adam update of the generator; discriminator parameters untouched."""
    opt_g.zero_grad()
    if disc is not None:
        zero_grads(disc.params())  # adversarial backward writes into them
    pred = gen.forward(images)
    l_g = loss_generator(pred, gt_hm, vis)
    l_adv = None
    d_fake = None
    if alpha > 0 and disc is not None:
        scores = disc.forward(pred)
        d_fake = float(scores.data.mean())
        l_adv = loss_generator_adversarial(scores)
        total = ad.add(l_g, ad.mul(l_adv, alpha))
    else:
        total = l_g
    _require_finite(float(total.data), "generator loss", epoch, step)
    backward(total)
    opt_g.step()
    return StepRecord(
        epoch, step, "G",
        loss_g=float(l_g.data),
        loss_adv=None if l_adv is None else float(l_adv.data),
        d_fake=d_fake,
    )


def train_step_d(gen, disc, opt_d, images, gt_hm, epoch: int = 0, step: int = 0):
    """One Adam update of the discriminator; generator parameters untouched."""
    opt_d.zero_grad()
    zero_grads(gen.params())
    fake = Tensor(gen.forward(images).data)  # detached from the generator
    scores_real = disc.forward(gt_hm if isinstance(gt_hm, Tensor) else Tensor(gt_hm))
    scores_fake = disc.forward(fake)
    l_d = loss_discriminator(scores_real, scores_fake)
    _require_finite(float(l_d.data), "discriminator loss", epoch, step)
    backward(l_d)
    opt_d.step()
    return StepRecord(
        epoch, step, "D",
        loss_d=float(l_d.data),
        d_real=float(scores_real.data.mean()),
        d_fake=float(scores_fake.data.mean()),
    )


# ---------------------------------------------------------------------------
# checkpointing


def _checkpoint_payload(gen, disc, opt_g, opt_d):
    named = dict(gen.named_params())
    for key, arr in opt_g.state_tensors().items():
        named[f"gen.{key}"] = arr
    if disc is not None:
        named.update(disc.named_params())
        for key, arr in opt_d.state_tensors().items():
            named[f"disc.{key}"] = arr
    return named


def _skeleton_meta(sk: SkeletonGraph) -> dict:
    return {
        "n_nodes": sk.n_nodes,
        "names": list(sk.names),
        "edges": [list(e) for e in sk.edges],
        "flip_pairs": [list(p) for p in sk.flip_pairs],
    }


def _save_state(path, gen, disc, opt_g, opt_d, cfg, dataset, epoch, step_counter, g_since_d):
    meta = {
        "epoch": epoch,
        "step_counter": step_counter,
        "g_since_d": g_since_d,
        "adam_t_g": opt_g.t,
        "adam_t_d": opt_d.t if opt_d is not None else 0,
        "config": dataclasses.asdict(cfg),
        "generator": gen.meta(),
        "discriminator": disc.meta() if disc is not None else None,
        "skeleton": _skeleton_meta(dataset.skeleton),
        "image_size": dataset.image_size,
        "stride": dataset.stride,
    }
    save_checkpoint(path, _checkpoint_payload(gen, disc, opt_g, opt_d), meta)


def load_models(path):
    """Rebuild the generator (and discriminator, if present) from a checkpoint."""
    named, meta = load_checkpoint(path)
    gen = CascadeGenerator.from_meta(meta["generator"])
    gen.load_named(named)
    disc = None
    if meta.get("discriminator"):
        sk_meta = meta["skeleton"]
        sk = SkeletonGraph(
            sk_meta["n_nodes"],
            tuple(tuple(e) for e in sk_meta["edges"]),
            tuple(sk_meta["names"]),
            tuple(tuple(p) for p in sk_meta["flip_pairs"]),
        )
        disc = GraphDiscriminator.from_meta(meta["discriminator"], sk)
        disc.load_named(named)
    return gen, disc, meta


def _latest_checkpoint(run_dir: Path):
    candidates = sorted(run_dir.glob("checkpoint_epoch_*.ckpt"))
    return candidates[-1] if candidates else None


# ---------------------------------------------------------------------------
# the loop


def train_loop(
    train_set: PoseDataset,
    val_set: PoseDataset,
    cfg: TrainConfig,
    run_dir=None,
    resume: bool = False,
    progress=None,
):
    """Train on ``train_set``; returns (generator, discriminator, log).

    The discriminator is ``None`` for alpha = 0 runs. When ``run_dir`` is
    given, per-epoch checkpoints and CSV logs are written there;
    ``resume=True`` picks up after the newest checkpoint.
    """
    if len(train_set.samples) == 0:
        raise ValueError("training dataset is empty")
    use_gan = cfg.alpha > 0
    sk = train_set.skeleton
    hm_size = train_set.image_size // train_set.stride

    gen = CascadeGenerator(
        sk.n_nodes,
        np.random.default_rng(np.random.SeedSequence([cfg.seed, _STREAM_GEN])),
        lateral=cfg.lateral,
    )
    disc = None
    opt_d = None
    if use_gan:
        disc = GraphDiscriminator(
            sk,
            hm_size,
            np.random.default_rng(np.random.SeedSequence([cfg.seed, _STREAM_DISC])),
            hidden_dim=cfg.hidden_dim,
            steps=cfg.ggnn_steps,
        )
        opt_d = Adam(disc.params(), lr=cfg.lr)
    opt_g = Adam(gen.params(), lr=cfg.lr)

    log = TrainLog()
    start_epoch = 1
    step_counter = 0
    g_since_d = 0

    run_path = Path(run_dir) if run_dir is not None else None
    if run_path is not None:
        run_path.mkdir(parents=True, exist_ok=True)
        latest = _latest_checkpoint(run_path) if resume else None
        if latest is not None:
            named, meta = load_checkpoint(latest)
            gen.load_named(named)
            opt_g.load_state_tensors(
                {k[len("gen."):]: v for k, v in named.items() if k.startswith("gen.adam.")},
                meta["adam_t_g"],
            )
            if use_gan:
                disc.load_named(named)
                opt_d.load_state_tensors(
                    {k[len("disc."):]: v for k, v in named.items() if k.startswith("disc.adam.")},
                    meta["adam_t_d"],
                )
            start_epoch = meta["epoch"] + 1
            step_counter = meta["step_counter"]
            g_since_d = meta["g_since_d"]
            steps_csv = run_path / "train_log.csv"
            epochs_csv = run_path / "val_log.csv"
            if steps_csv.exists() and epochs_csv.exists():
                log = TrainLog.read_csv(steps_csv, epochs_csv)

    for epoch in range(start_epoch, cfg.max_epochs + 1):
        lr = cfg.lr_at(epoch)
        opt_g.lr = lr
        if opt_d is not None:
            opt_d.lr = lr
        order = np.random.default_rng(np.random.SeedSequence([cfg.seed, _STREAM_SHUFFLE, epoch])).permutation(
            len(train_set.samples)
        )
        aug_seed = None
        if cfg.augment:
            aug_seed = int(np.random.SeedSequence([cfg.seed, _STREAM_AUGMENT, epoch]).generate_state(1)[0])
        for start in range(0, len(order), cfg.batch_size):
            chunk = [train_set.samples[i] for i in order[start : start + cfg.batch_size]]
            if aug_seed is not None:
                chunk = [
                    augment(
                        s, sk, cfg.flip_prob, cfg.max_rotation_deg,
                        (cfg.scale_low, cfg.scale_high), seed=aug_seed,
                    )
                    for s in chunk
                ]
            images, gt_hm, vis = batch_arrays(train_set, chunk, cfg.sigma)
            step_counter += 1
            log.steps.append(
                train_step_g(gen, disc, opt_g, images, gt_hm, vis, cfg.alpha, epoch, step_counter)
            )
            g_since_d += 1
            if use_gan and g_since_d == cfg.g_steps_per_d:
                step_counter += 1
                log.steps.append(train_step_d(gen, disc, opt_d, images, gt_hm, epoch, step_counter))
                g_since_d = 0
        val_pck = evaluate_pck(gen, val_set, cfg.eval_threshold) if len(val_set.samples) else float("nan")
        log.epochs.append(EpochRecord(epoch, lr, val_pck))
        if progress is not None:
            progress(epoch, lr, val_pck)
        if run_path is not None:
            _save_state(
                run_path / f"checkpoint_epoch_{epoch:04d}.ckpt",
                gen, disc, opt_g, opt_d, cfg, train_set, epoch, step_counter, g_since_d,
            )
            log.write_csv(run_path / "train_log.csv", run_path / "val_log.csv")

    if run_path is not None:
        _save_state(
            run_path / "final.ckpt",
            gen, disc, opt_g, opt_d, cfg, train_set, cfg.max_epochs, step_counter, g_since_d,
        )
    return gen, disc, log


def alpha_sweep(train_set, val_set, cfg: TrainConfig, alphas, out_csv=None):
    """Final validation PCK per alpha, all runs sharing the config's seed."""
    if not alphas:
        raise ValueError("alphas must be nonempty")
    rows = []
    for a in alphas:
        run_cfg = dataclasses.replace(cfg, alpha=float(a))
        gen, _, log = train_loop(train_set, val_set, run_cfg)
        rows.append((float(a), log.epochs[-1].val_pck))
    if out_csv is not None:
        with open(out_csv, "w", encoding="utf-8") as fh:
            fh.write("alpha,val_pck\n")
            for a, p in rows:
                fh.write(f"{a!r},{p!r}\n")
    return rows
