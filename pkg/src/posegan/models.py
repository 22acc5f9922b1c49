"""Generator and discriminator networks plus their training losses.

The generator is a small encoder/decoder heatmap regressor: three stride-2
conv stages, one transposed-conv decoder stage whose features are fused by
element-wise addition with a 1x1-projected encoder stage, and a final 1x1
head mapping features to one heatmap channel per joint (output resolution
is a quarter of the input on each side).

The discriminator embeds each joint's heatmap channel with a weight-shared
two-layer conv encoder followed by spatial *moment* pooling: every feature
map contributes its total mass and its mass-weighted centroid coordinates.
Centroid pooling, unlike global average pooling, keeps peak position
visible to the graph network — a pose with every joint drawn crisply in
the wrong place must be distinguishable from a correct one. Node states
are then refined by gated graph propagation over the skeleton and read out
per node through a shared linear + sigmoid layer, giving one plausibility
score per joint, strictly inside (0, 1).

Losses:
  generator heatmap loss   mean over joints of v_n * ||pred_n - gt_n||_2
                           (per-channel Euclidean norm, visibility-masked)
  discriminator loss       BCE with target 1 on real scores and 0 on fakes
  generator adversarial    BCE of fake scores against target 1
                           (the non-saturating "deceive the critic" form)
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import ggnn
from .autodiff import Tensor
from .skeleton import SkeletonGraph

__all__ = [
    "CascadeGenerator",
    "GraphDiscriminator",
    "loss_generator",
    "loss_discriminator",
    "loss_generator_adversarial",
    "per_channel_mse",
]


def _zeros(shape):
    return Tensor(np.zeros(shape), track_grad=True)


class CascadeGenerator:
    """Heatmap generator with lateral feature fusion ("cascade" skip path)."""

    ENCODER_STRIDE = 8  # three stride-2 stages

    def __init__(
        self,
        n_joints: int,
        rng: np.random.Generator,
        in_channels: int = 1,
        channels: tuple = (16, 32, 64),
        lateral: bool = True,
    ):
        if len(channels) != 3:
            raise ValueError("generator expects exactly three encoder stages")
        self.n_joints = n_joints
        self.in_channels = in_channels
        self.channels = tuple(channels)
        self.lateral = bool(lateral)
        c1, c2, c3 = channels
        # 4x4 stride-2 kernels keep the downsampling geometry exact
        self.enc1_w = ad.uniform_fan_in(rng, (c1, in_channels, 4, 4))
        self.enc1_b = _zeros(c1)
        self.enc2_w = ad.uniform_fan_in(rng, (c2, c1, 4, 4))
        self.enc2_b = _zeros(c2)
        self.enc3_w = ad.uniform_fan_in(rng, (c3, c2, 4, 4))
        self.enc3_b = _zeros(c3)
        self.lat_w = ad.uniform_fan_in(rng, (c2, c2, 1, 1))
        self.lat_b = _zeros(c2)
        # transposed conv kernel: (C_in, C_out, KH, KW) layout of conv2d
        self.up1_w = ad.uniform_fan_in(rng, (c3, c2, 4, 4), fan_in=c3 * 16)
        self.up1_b = _zeros(c2)
        self.head_w = ad.uniform_fan_in(rng, (n_joints, c2, 1, 1))
        self.head_b = _zeros(n_joints)

    def named_params(self) -> dict:
        names = [
            "enc1_w", "enc1_b", "enc2_w", "enc2_b", "enc3_w", "enc3_b",
            "lat_w", "lat_b", "up1_w", "up1_b", "head_w", "head_b",
        ]
        return {f"gen.{n}": getattr(self, n) for n in names}

    def params(self) -> list:
        return list(self.named_params().values())

    def forward(self, image: Tensor) -> Tensor:
        """Predict heatmaps for a (C, S, S) image or a (B, C, S, S) batch."""
        s = image.shape[-1]
        if s % self.ENCODER_STRIDE != 0 or image.shape[-2] % self.ENCODER_STRIDE != 0:
            raise ValueError(f"input size {image.shape} not divisible by encoder stride {self.ENCODER_STRIDE}")
        e1 = ad.relu(ad.conv2d(image, self.enc1_w, self.enc1_b, stride=2, pad=1))
        e2 = ad.relu(ad.conv2d(e1, self.enc2_w, self.enc2_b, stride=2, pad=1))
        e3 = ad.relu(ad.conv2d(e2, self.enc3_w, self.enc3_b, stride=2, pad=1))
        u = ad.conv_transpose2d(e3, self.up1_w, self.up1_b, stride=2, pad=1)
        if self.lateral:
            u = ad.add(u, ad.conv2d(e2, self.lat_w, self.lat_b, stride=1, pad=0))
        u = ad.relu(u)
        return ad.conv2d(u, self.head_w, self.head_b, stride=1, pad=0)

    def meta(self) -> dict:
        return {
            "model": "cascade_generator",
            "n_joints": self.n_joints,
            "in_channels": self.in_channels,
            "channels": list(self.channels),
            "lateral": self.lateral,
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "CascadeGenerator":
        return cls(
            meta["n_joints"],
            np.random.default_rng(0),
            in_channels=meta["in_channels"],
            channels=tuple(meta["channels"]),
            lateral=meta["lateral"],
        )

    def load_named(self, named: dict) -> None:
        for name, tensor in self.named_params().items():
            arr = named[name]
            if arr.shape != tensor.data.shape:
                raise ValueError(f"checkpoint shape mismatch for {name}: {arr.shape} vs {tensor.data.shape}")
            tensor.data = np.ascontiguousarray(arr)


class GraphDiscriminator:
    """Per-joint plausibility critic over heatmaps, graph-refined."""

    def __init__(
        self,
        graph: SkeletonGraph,
        hm_size: int,
        rng: np.random.Generator,
        hidden_dim: int = 64,
        steps: int = 3,
        enc_channels: int = 8,
    ):
        self.graph = graph
        self.hm_size = hm_size
        self.hidden_dim = hidden_dim
        self.steps = steps
        self.enc_channels = enc_channels
        c = enc_channels
        self.enc1_w = ad.uniform_fan_in(rng, (c, 1, 3, 3))
        self.enc1_b = _zeros(c)
        self.enc2_w = ad.uniform_fan_in(rng, (c, c, 3, 3))
        self.enc2_b = _zeros(c)
        # moment features: per feature map a mass, centroid-x and centroid-y;
        # three projections summed == one linear layer on their concatenation
        self.proj_m = ad.uniform_fan_in(rng, (hidden_dim, c), fan_in=3 * c)
        self.proj_x = ad.uniform_fan_in(rng, (hidden_dim, c), fan_in=3 * c)
        self.proj_y = ad.uniform_fan_in(rng, (hidden_dim, c), fan_in=3 * c)
        self.proj_b = _zeros(hidden_dim)
        self.gnn = ggnn.GgnnParams.init(hidden_dim, rng)
        self.read_w = ad.uniform_fan_in(rng, (1, hidden_dim))
        self.read_b = _zeros(1)
        grid = (np.arange(hm_size) + 0.5) / hm_size * 2.0 - 1.0   # cell centers in [-1, 1]
        xs, ys = np.meshgrid(grid, grid)
        self._xcol = Tensor(xs.reshape(-1, 1))
        self._ycol = Tensor(ys.reshape(-1, 1))
        self._ones = Tensor(np.ones((hm_size * hm_size, 1)))

    def named_params(self) -> dict:
        out = {}
        for n in (
            "enc1_w", "enc1_b", "enc2_w", "enc2_b",
            "proj_m", "proj_x", "proj_y", "proj_b", "read_w", "read_b",
        ):
            out[f"disc.{n}"] = getattr(self, n)
        out.update(self.gnn.named("disc.ggnn"))
        return out

    def params(self) -> list:
        return list(self.named_params().values())

    def node_states(self, heatmaps: Tensor) -> Tensor:
        """Encode each joint channel into its initial hidden state."""
        shape = heatmaps.shape
        batched = len(shape) == 4
        if not batched and len(shape) != 3:
            raise ValueError(f"heatmaps must be (N,H,W) or (B,N,H,W), got {shape}")
        n = shape[1] if batched else shape[0]
        if n != self.graph.n_nodes:
            raise ValueError(f"heatmaps have {n} channels but the graph has {self.graph.n_nodes} nodes")
        b = shape[0] if batched else 1
        h = shape[-1]
        if h != self.hm_size:
            raise ValueError(f"heatmap size {h} does not match encoder size {self.hm_size}")
        c = self.enc_channels
        # every joint channel becomes an independent single-channel image
        x = ad.reshape(heatmaps, (b * n, 1, h, h))
        f = ad.relu(ad.conv2d(x, self.enc1_w, self.enc1_b, stride=1, pad=1))
        f = ad.relu(ad.conv2d(f, self.enc2_w, self.enc2_b, stride=1, pad=1))
        flat = ad.reshape(f, (b * n * c, h * h))
        mass = ad.matmul(flat, self._ones)                  # (b*n*c, 1), >= 0 after relu
        mx = ad.matmul(flat, self._xcol)
        my = ad.matmul(flat, self._ycol)
        denom = ad.add(mass, 1.0)
        cx = ad.reshape(ad.div(mx, denom), (b * n, c))
        cy = ad.reshape(ad.div(my, denom), (b * n, c))
        m = ad.reshape(ad.mul(mass, 1.0 / (h * h)), (b * n, c))
        states = ad.add(
            ad.add(ad.matmul(m, ad.transpose(self.proj_m)), ad.matmul(cx, ad.transpose(self.proj_x))),
            ad.matmul(cy, ad.transpose(self.proj_y)),
        )
        states = ad.add_rowvec(states, self.proj_b)
        if batched:
            return ad.reshape(states, (b, n, self.hidden_dim))
        return states

    def forward(self, heatmaps: Tensor) -> Tensor:
        """Per-joint scores in (0,1): shape (N,) or (B, N) for batches."""
        states = self.node_states(heatmaps)
        batched = len(states.shape) == 3
        states = ggnn.propagate(self.graph, states, self.gnn, self.steps)
        n = self.graph.n_nodes
        if batched:
            b = states.shape[0]
            flat = ad.reshape(states, (b * n, self.hidden_dim))
        else:
            b = 1
            flat = states
        logits = ad.add_rowvec(ad.matmul(flat, ad.transpose(self.read_w)), self.read_b)
        scores = ad.sigmoid(logits)
        return ad.reshape(scores, (b, n)) if batched else ad.reshape(scores, (n,))

    def meta(self) -> dict:
        return {
            "model": "graph_discriminator",
            "hm_size": self.hm_size,
            "hidden_dim": self.hidden_dim,
            "steps": self.steps,
            "enc_channels": self.enc_channels,
        }

    @classmethod
    def from_meta(cls, meta: dict, graph: SkeletonGraph) -> "GraphDiscriminator":
        return cls(
            graph,
            meta["hm_size"],
            np.random.default_rng(0),
            hidden_dim=meta["hidden_dim"],
            steps=meta["steps"],
            enc_channels=meta["enc_channels"],
        )

    def load_named(self, named: dict) -> None:
        for name, tensor in self.named_params().items():
            arr = named[name]
            if arr.shape != tensor.data.shape:
                raise ValueError(f"checkpoint shape mismatch for {name}: {arr.shape} vs {tensor.data.shape}")
            tensor.data = np.ascontiguousarray(arr)


# ---------------------------------------------------------------------------
# losses


def _as_vis_array(vis, n_last: int) -> np.ndarray:
    v = np.asarray(vis, dtype=np.float64)
    if v.shape[-1] != n_last:
        raise ValueError(f"visibility shape {v.shape} does not match {n_last} joints")
    return v


def loss_generator(pred: Tensor, gt: Tensor, vis) -> Tensor:
    """Visibility-masked mean per-channel Euclidean distance.

    ``pred`` and ``gt`` are (N, H, W) stacks or (B, N, H, W) batches; ``vis``
    matches their leading joint axes. The per-channel distance is the root
    of the summed squared per-pixel differences over that channel. Batches
    average the per-sample loss.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    batched = len(pred.shape) == 4
    n = pred.shape[1] if batched else pred.shape[0]
    v = _as_vis_array(vis, n)
    if batched and v.shape != pred.shape[:2]:
        raise ValueError(f"visibility shape {v.shape} does not match batch {pred.shape[:2]}")
    diff = ad.sub(pred, gt)
    sq = ad.mul(diff, diff)
    per_channel = ad.tsum(sq, axes=(2, 3) if batched else (1, 2))
    norms = ad.sqrt(per_channel)
    masked = ad.mul(norms, Tensor(v))
    scale = 1.0 / (n * (pred.shape[0] if batched else 1))
    return ad.mul(ad.tsum(masked), scale)


def per_channel_mse(pred: Tensor, gt: Tensor, vis) -> Tensor:
    """Alternative per-pixel MSE form of the heatmap loss (config flag)."""
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    batched = len(pred.shape) == 4
    n = pred.shape[1] if batched else pred.shape[0]
    v = _as_vis_array(vis, n)
    diff = ad.sub(pred, gt)
    sq = ad.mul(diff, diff)
    per_channel = ad.tsum(sq, axes=(2, 3) if batched else (1, 2))
    masked = ad.mul(per_channel, Tensor(v))
    hw = pred.shape[-1] * pred.shape[-2]
    scale = 1.0 / (n * hw * (pred.shape[0] if batched else 1))
    return ad.mul(ad.tsum(masked), scale)


def _check_scores(scores: Tensor, name: str) -> None:
    if np.any(scores.data <= 0.0) or np.any(scores.data >= 1.0):
        raise ValueError(f"{name}: scores must lie strictly in (0,1)")


def _bce_against_one(scores: Tensor) -> Tensor:
    return ad.neg(ad.mean(ad.log(scores)))


def _bce_against_zero(scores: Tensor) -> Tensor:
    one_minus = ad.add(ad.neg(scores), 1.0)
    return ad.neg(ad.mean(ad.log(one_minus)))


def loss_discriminator(scores_real: Tensor, scores_fake: Tensor) -> Tensor:
    """BCE with target 1 on real-pose scores and target 0 on fakes.

    Averages over joints and any batch axis; 0 in the perfect-discrimination
    limit, log(2) per term at scores of one half.
    """
    _check_scores(scores_real, "loss_discriminator(real)")
    _check_scores(scores_fake, "loss_discriminator(fake)")
    return ad.add(_bce_against_one(scores_real), _bce_against_zero(scores_fake))


def loss_generator_adversarial(scores_fake: Tensor) -> Tensor:
    """BCE of generated-pose scores against target 1 (non-saturating)."""
    _check_scores(scores_fake, "loss_generator_adversarial")
    return _bce_against_one(scores_fake)
