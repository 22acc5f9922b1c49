"""Synthetic articulated-pose data, augmentation, and annotation file I/O.

Samples are stick figures rendered on a dark background: anti-aliased limb
segments (left limbs brighter than right, so the two sides are visually
distinguishable), a bright blob at every visible joint, and a flat grey
patch dropped over every occluded joint. The patch is offset randomly from
the joint it hides, so an occluded joint's exact position can only be
inferred from the skeleton context, never read off the patch center.
Occluded joints keep their true coordinates in the annotation with v = 0.

Poses are sampled by walking the kinematic tree with fixed limb-length
proportions and bounded joint-angle priors; everything is driven by
per-sample seeds, so generation is deterministic and order-independent.

The annotation format is line-oriented text with an explicit header
(skeleton, image geometry, version). Joint coordinates are written with
full round-trip precision; images are either inline (base64 of raw
float64 little-endian values — lossless) or external 16-bit PGM files
(quantized).
"""

from __future__ import annotations

import base64
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .skeleton import SkeletonGraph, validate_tree

__all__ = [
    "PoseSample",
    "PoseDataset",
    "synth_generate",
    "shuffle_pose",
    "augment",
    "apply_similarity",
    "read_annotations",
    "write_annotations",
]

FORMAT_VERSION = 1

# Limb lengths as fractions of the sampled figure height.
_PROPORTIONS = {
    "torso": 0.30,       # pelvis -> thorax (or hip midpoint -> neck)
    "neck": 0.10,        # thorax -> upper neck
    "head": 0.13,        # neck -> head top
    "hip_offset": 0.09,
    "shoulder_offset": 0.14,
    "thigh": 0.24,
    "shin": 0.24,
    "upper_arm": 0.17,
    "forearm": 0.17,
}

_LIMB_BRIGHT_LEFT = 0.95
_LIMB_BRIGHT_RIGHT = 0.55
_LIMB_BRIGHT_CENTER = 0.75
_PATCH_VALUE = 0.35
_BLOB_SIGMA = 1.4
_LIMB_RADIUS = 0.9
_LIMB_AA = 1.0


@dataclass
class PoseSample:
    """One rendered figure with its annotation and normalization metadata."""

    image: Tensor                 # (1, S, S), values in [0, 1]
    joints: np.ndarray            # (N, 2) float64 pixel coordinates (x, y)
    vis: np.ndarray               # (N,) int, 1 visible / 0 occluded
    head_size: float
    person_scale: float
    sample_id: int = 0
    seed: int = 0


@dataclass
class PoseDataset:
    skeleton: SkeletonGraph
    image_size: int
    stride: int
    samples: list

    def __len__(self) -> int:
        return len(self.samples)


# ---------------------------------------------------------------------------
# pose sampling


def _direction(angle: float) -> np.ndarray:
    # angle 0 points down the image (+y); pi points up.
    return np.array([np.sin(angle), np.cos(angle)])


def _sample_pose_mpii(rng: np.random.Generator, size: int, height: float) -> np.ndarray:
    p = {k: v * height for k, v in _PROPORTIONS.items()}
    joints = np.zeros((16, 2))
    pelvis = np.array(
        [rng.uniform(0.42, 0.58) * size, rng.uniform(0.50, 0.62) * size]
    )
    torso_angle = np.pi + rng.uniform(-0.35, 0.35)
    thorax = pelvis + p["torso"] * _direction(torso_angle)
    neck = thorax + p["neck"] * _direction(torso_angle + rng.uniform(-0.25, 0.25))
    head = neck + p["head"] * _direction(torso_angle + rng.uniform(-0.30, 0.30))

    joints[6], joints[7], joints[8], joints[9] = pelvis, thorax, neck, head

    # right side offsets point toward -x for an upright torso
    r_perp = _direction(torso_angle + np.pi / 2)
    for side, hip_i, knee_i, ankle_i, sign in (("r", 2, 1, 0, 1.0), ("l", 3, 4, 5, -1.0)):
        hip = pelvis + sign * p["hip_offset"] * r_perp
        thigh_angle = rng.uniform(-0.45, 0.45) - 0.10 * sign
        knee = hip + p["thigh"] * _direction(thigh_angle)
        bend = rng.uniform(-0.20, 0.90)
        ankle = knee + p["shin"] * _direction(thigh_angle + bend)
        joints[hip_i], joints[knee_i], joints[ankle_i] = hip, knee, ankle

    for side, sho_i, elb_i, wri_i, sign in (("r", 12, 11, 10, 1.0), ("l", 13, 14, 15, -1.0)):
        shoulder = thorax + sign * p["shoulder_offset"] * r_perp
        upper_angle = rng.uniform(-1.1, 1.1) + 0.25 * sign
        elbow = shoulder + p["upper_arm"] * _direction(upper_angle)
        bend = rng.uniform(-0.2, 1.5) * (-sign)
        wrist = elbow + p["forearm"] * _direction(upper_angle + bend)
        joints[sho_i], joints[elb_i], joints[wri_i] = shoulder, elbow, wrist
    return joints


def _sample_pose_lsp(rng: np.random.Generator, size: int, height: float) -> np.ndarray:
    m = _sample_pose_mpii(rng, size, height)
    # drop pelvis(6) and thorax(7); upper-neck doubles as the LSP neck
    order = [0, 1, 2, 3, 4, 5, 10, 11, 12, 13, 14, 15, 8, 9]
    return m[order]


_POSE_SAMPLERS = {16: _sample_pose_mpii, 14: _sample_pose_lsp}


def _expected_limb_fractions(skeleton: SkeletonGraph) -> dict:
    """Edge -> limb-length fraction of figure height, for the built-ins."""
    by_name = {
        ("ankle", "knee"): _PROPORTIONS["shin"],
        ("hip", "knee"): _PROPORTIONS["thigh"],
        ("hip", "pelvis"): _PROPORTIONS["hip_offset"],
        ("pelvis", "thorax"): _PROPORTIONS["torso"],
        ("thorax", "upper_neck"): _PROPORTIONS["neck"],
        ("head_top", "upper_neck"): _PROPORTIONS["head"],
        ("head_top", "neck"): _PROPORTIONS["head"],
        ("shoulder", "thorax"): _PROPORTIONS["shoulder_offset"],
        ("elbow", "shoulder"): _PROPORTIONS["upper_arm"],
        ("elbow", "wrist"): _PROPORTIONS["forearm"],
    }
    out = {}
    for a, b in skeleton.edges:
        ca = skeleton.names[a].split("_", 1)[-1]
        cb = skeleton.names[b].split("_", 1)[-1]
        key = tuple(sorted((ca, cb)))
        if key in by_name:
            out[(a, b)] = by_name[key]
    return out


# ---------------------------------------------------------------------------
# rendering


def _edge_brightness(skeleton: SkeletonGraph, a: int, b: int) -> float:
    names = (skeleton.names[a], skeleton.names[b])
    if any(n.startswith("r_") for n in names):
        return _LIMB_BRIGHT_RIGHT
    if any(n.startswith("l_") for n in names):
        return _LIMB_BRIGHT_LEFT
    return _LIMB_BRIGHT_CENTER


def _render(skeleton: SkeletonGraph, joints: np.ndarray, vis: np.ndarray, size: int, rng) -> np.ndarray:
    xx, yy = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64))
    img = np.zeros((size, size))
    for a, b in skeleton.edges:
        p, q = joints[a], joints[b]
        v = q - p
        l2 = float(v @ v)
        if l2 < 1e-12:
            continue
        t = np.clip(((xx - p[0]) * v[0] + (yy - p[1]) * v[1]) / l2, 0.0, 1.0)
        dx = xx - (p[0] + t * v[0])
        dy = yy - (p[1] + t * v[1])
        dist = np.hypot(dx, dy)
        stroke = np.clip(1.0 - (dist - _LIMB_RADIUS) / _LIMB_AA, 0.0, 1.0)
        img = np.maximum(img, _edge_brightness(skeleton, a, b) * stroke)

    # occluding patches before the visible blobs, so a patch never hides one
    for n in range(skeleton.n_nodes):
        if vis[n] != 0:
            continue
        half = rng.integers(4, 7)
        off = rng.uniform(-3.0, 3.0, size=2)
        cx, cy = joints[n] + off
        x0, x1 = int(np.clip(cx - half, 0, size)), int(np.clip(cx + half + 1, 0, size))
        y0, y1 = int(np.clip(cy - half, 0, size)), int(np.clip(cy + half + 1, 0, size))
        img[y0:y1, x0:x1] = _PATCH_VALUE

    for n in range(skeleton.n_nodes):
        if vis[n] == 0:
            continue
        blob = np.exp(-((xx - joints[n, 0]) ** 2 + (yy - joints[n, 1]) ** 2) / (2.0 * _BLOB_SIGMA**2))
        img = np.maximum(img, blob)
    return img


def _head_indices(skeleton: SkeletonGraph):
    top = skeleton.index("head_top")
    base = skeleton.index("upper_neck") if "upper_neck" in skeleton.names else skeleton.index("neck")
    return base, top


def _person_scale(joints: np.ndarray) -> float:
    span = joints.max(axis=0) - joints.min(axis=0)
    return float(span.max())


def synth_generate(
    seed: int,
    count: int,
    skeleton: SkeletonGraph,
    image_size: int = 64,
    occlusion_rate: float = 0.0,
    stride: int = 4,
) -> PoseDataset:
    """Render ``count`` figures with independent per-joint occlusion.

    Deterministic in ``seed``; sample i depends only on (seed, i), so any
    subset can be regenerated independently.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if not 0.0 <= occlusion_rate <= 1.0:
        raise ValueError("occlusion_rate must lie in [0, 1]")
    if skeleton.n_nodes not in _POSE_SAMPLERS:
        raise ValueError(f"no pose sampler for a {skeleton.n_nodes}-joint skeleton")
    sampler = _POSE_SAMPLERS[skeleton.n_nodes]
    samples = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        height = rng.uniform(0.55, 0.78) * image_size
        joints = sampler(rng, image_size, height)
        while joints.min() < 2.0 or joints.max() > image_size - 3.0:
            height *= 0.92
            joints = sampler(rng, image_size, height)
        vis = (rng.random(skeleton.n_nodes) >= occlusion_rate).astype(np.int64)
        img = _render(skeleton, joints, vis, image_size, rng)
        base, top = _head_indices(skeleton)
        samples.append(
            PoseSample(
                image=Tensor(img[None]),
                joints=joints,
                vis=vis,
                head_size=float(np.linalg.norm(joints[top] - joints[base])),
                person_scale=_person_scale(joints),
                sample_id=i,
                seed=seed,
            )
        )
    return PoseDataset(skeleton, image_size, stride, samples)


# ---------------------------------------------------------------------------
# negatives and augmentation


def shuffle_pose(sample: PoseSample, seed: int) -> PoseSample:
    """Derangement of joint locations across joint identities.

    Every joint receives another joint's coordinates (and that joint's
    visibility), so the coordinate multiset is preserved while limb-length
    and adjacency statistics are broken.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, sample.sample_id]))
    n = sample.joints.shape[0]
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            break
    return PoseSample(
        image=sample.image,
        joints=sample.joints[perm].copy(),
        vis=sample.vis[perm].copy(),
        head_size=sample.head_size,
        person_scale=sample.person_scale,
        sample_id=sample.sample_id,
        seed=sample.seed,
    )


def _bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    h, w = img.shape
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    out = np.zeros_like(x)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            weight = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            vals = np.where(inside, img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)], 0.0)
            out += weight * vals
    return out


def apply_similarity(
    sample: PoseSample,
    skeleton: SkeletonGraph,
    flip: bool,
    angle_deg: float,
    scale: float,
) -> PoseSample:
    """Apply an explicit flip/rotation/scaling about the image center.

    Joints transform exactly; the image is resampled bilinearly through the
    inverse map. Joints pushed out of bounds become invisible.
    """
    img = sample.image.data[0]
    size = img.shape[0]
    c = (size - 1) / 2.0
    theta = np.deg2rad(angle_deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)

    pts = sample.joints.copy()
    vis = sample.vis.copy()
    if flip:
        pts[:, 0] = (size - 1) - pts[:, 0]
        fm = skeleton.flip_map()
        pts = pts[fm]
        vis = vis[fm]
    rel = pts - c
    out_pts = np.empty_like(rel)
    out_pts[:, 0] = scale * (cos_t * rel[:, 0] - sin_t * rel[:, 1]) + c
    out_pts[:, 1] = scale * (sin_t * rel[:, 0] + cos_t * rel[:, 1]) + c
    oob = (out_pts[:, 0] < 0) | (out_pts[:, 0] > size - 1) | (out_pts[:, 1] < 0) | (out_pts[:, 1] > size - 1)
    vis = np.where(oob, 0, vis)

    src = img[:, ::-1] if flip else img
    xx, yy = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64))
    inv = 1.0 / scale
    sx = inv * (cos_t * (xx - c) + sin_t * (yy - c)) + c
    sy = inv * (-sin_t * (xx - c) + cos_t * (yy - c)) + c
    warped = _bilinear(src, sx, sy)

    return PoseSample(
        image=Tensor(warped[None]),
        joints=out_pts,
        vis=vis,
        head_size=sample.head_size * scale,
        person_scale=_person_scale(out_pts),
        sample_id=sample.sample_id,
        seed=sample.seed,
    )


def augment(
    sample: PoseSample,
    skeleton: SkeletonGraph,
    flip_prob: float = 0.5,
    max_rotation_deg: float = 30.0,
    scale_range: tuple = (0.75, 1.25),
    seed: int = 0,
) -> PoseSample:
    """Random flip / rotation / scaling with the stated parameter bounds."""
    if not 0.0 <= flip_prob <= 1.0:
        raise ValueError("flip_prob must lie in [0, 1]")
    if max_rotation_deg < 0.0:
        raise ValueError("max_rotation_deg must be >= 0")
    lo, hi = scale_range
    if not (0.0 < lo <= hi):
        raise ValueError("scale_range must satisfy 0 < lo <= hi")
    rng = np.random.default_rng(np.random.SeedSequence([seed, sample.sample_id]))
    flip = bool(rng.random() < flip_prob)
    angle = float(rng.uniform(-max_rotation_deg, max_rotation_deg)) if max_rotation_deg > 0 else 0.0
    scale = float(rng.uniform(lo, hi))
    if not flip and angle == 0.0 and scale == 1.0:
        return sample
    return apply_similarity(sample, skeleton, flip, angle, scale)


# ---------------------------------------------------------------------------
# annotation files


def _pairs_str(pairs) -> str:
    return " ".join(f"{a}-{b}" for a, b in pairs) if pairs else "-"


def _parse_pairs(text: str, what: str):
    if text.strip() == "-":
        return ()
    out = []
    for token in text.split():
        a, _, b = token.partition("-")
        try:
            out.append((int(a), int(b)))
        except ValueError:
            raise ValueError(f"malformed {what} entry {token!r}") from None
    return tuple(out)


def write_annotations(dataset: PoseDataset, path, images: str = "inline") -> None:
    """Write the dataset; ``images`` is ``inline`` (lossless) or ``external``.

    External mode stores each image as a 16-bit PGM next to the annotation
    file (quantized); inline mode keeps exact float64 pixels in base64.
    """
    if images not in ("inline", "external"):
        raise ValueError("images must be 'inline' or 'external'")
    path = Path(path)
    sk = dataset.skeleton
    lines = [
        f"version {FORMAT_VERSION}",
        f"image_size {dataset.image_size}",
        f"stride {dataset.stride}",
        f"n_joints {sk.n_nodes}",
        "names " + " ".join(sk.names),
        "edges " + _pairs_str(sk.edges),
        "flip_pairs " + _pairs_str(sk.flip_pairs),
        f"image_mode {images}",
        f"count {len(dataset.samples)}",
    ]
    from .heatmaps import write_pgm

    for s in dataset.samples:
        lines.append("---")
        lines.append(f"id {s.sample_id}")
        lines.append(f"seed {s.seed}")
        lines.append(f"head_size {s.head_size!r}")
        lines.append(f"person_scale {s.person_scale!r}")
        for j in range(sk.n_nodes):
            lines.append(f"joint {s.joints[j, 0]!r} {s.joints[j, 1]!r} {int(s.vis[j])}")
        if images == "inline":
            raw = np.ascontiguousarray(s.image.data[0], dtype="<f8").tobytes()
            lines.append("image inline " + base64.b64encode(raw).decode("ascii"))
        else:
            name = f"{path.stem}_{s.sample_id:06d}.pgm"
            write_pgm(path.parent / name, s.image.data[0])
            lines.append(f"image file {name}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _header_value(lines, idx, key):
    if idx >= len(lines) or not lines[idx].startswith(key + " "):
        raise ValueError(f"annotation header: expected '{key}' on line {idx + 1}")
    return lines[idx][len(key) + 1 :]


def read_annotations(path) -> PoseDataset:
    """Parse an annotation file; malformed content is rejected with the
    failing record named."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    version = _header_value(lines, 0, "version")
    if version.strip() != str(FORMAT_VERSION):
        raise ValueError(f"unknown annotation format version {version.strip()!r}")
    image_size = int(_header_value(lines, 1, "image_size"))
    stride = int(_header_value(lines, 2, "stride"))
    n_joints = int(_header_value(lines, 3, "n_joints"))
    names = tuple(_header_value(lines, 4, "names").split())
    edges = _parse_pairs(_header_value(lines, 5, "edges"), "edge")
    flip_pairs = _parse_pairs(_header_value(lines, 6, "flip_pairs"), "flip pair")
    image_mode = _header_value(lines, 7, "image_mode").strip()
    count = int(_header_value(lines, 8, "count"))
    if len(names) != n_joints:
        raise ValueError(f"annotation header: {len(names)} names for {n_joints} joints")
    skeleton = SkeletonGraph(n_joints, edges, names, flip_pairs)
    if not validate_tree(skeleton):
        raise ValueError("annotation header: skeleton edges do not form a tree")
    from .heatmaps import read_pgm

    samples = []
    pos = 9
    for rec in range(count):
        try:
            if pos >= len(lines) or lines[pos] != "---":
                raise ValueError("missing record separator")
            pos += 1
            sample_id = int(_rec_field(lines, pos, "id"))
            seed = int(_rec_field(lines, pos + 1, "seed"))
            head_size = float(_rec_field(lines, pos + 2, "head_size"))
            person_scale = float(_rec_field(lines, pos + 3, "person_scale"))
            pos += 4
            joints = np.zeros((n_joints, 2))
            vis = np.zeros(n_joints, dtype=np.int64)
            for j in range(n_joints):
                parts = _rec_field(lines, pos, "joint").split()
                if len(parts) != 3:
                    raise ValueError("joint line must be 'joint x y v'")
                joints[j] = (float(parts[0]), float(parts[1]))
                vis[j] = int(parts[2])
                if vis[j] not in (0, 1):
                    raise ValueError(f"visibility must be 0 or 1, got {parts[2]}")
                pos += 1
            if pos < len(lines) and lines[pos].startswith("joint "):
                raise ValueError(f"more joints than the header's n_joints={n_joints}")
            img_line = _rec_field(lines, pos, "image").split(None, 1)
            pos += 1
            if len(img_line) != 2:
                raise ValueError("malformed image line")
            kind, payload = img_line
            if kind == "inline":
                if image_mode != "inline":
                    raise ValueError("inline image in an external-mode file")
                raw = base64.b64decode(payload.encode("ascii"))
                if len(raw) != 8 * image_size * image_size:
                    raise ValueError("inline image payload has the wrong size")
                img = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(image_size, image_size)
            elif kind == "file":
                img = read_pgm(path.parent / payload)
            else:
                raise ValueError(f"unknown image storage kind {kind!r}")
        except ValueError as e:
            raise ValueError(f"annotation record {rec}: {e}") from None
        samples.append(
            PoseSample(
                image=Tensor(img[None]),
                joints=joints,
                vis=vis,
                head_size=head_size,
                person_scale=person_scale,
                sample_id=sample_id,
                seed=seed,
            )
        )
    return PoseDataset(skeleton, image_size, stride, samples)


def _rec_field(lines, idx, key):
    if idx >= len(lines) or not lines[idx].startswith(key + " "):
        found = lines[idx] if idx < len(lines) else "<end of file>"
        raise ValueError(f"expected '{key}' field, found {found!r}")
    return lines[idx][len(key) + 1 :]
