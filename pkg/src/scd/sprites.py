"""Procedural articulated puppets: disentangled appearance and pose,
deterministic anti-aliased rendering, and a flat binary dataset format.

A puppet is six capsules (torso, neck+head disc, two arms, two legs) on a
flat background. Appearance is the color palette plus a torso pattern;
pose is six joint angles plus root position and scale. The pose map
renders the same skeleton as thin per-limb line channels, so image and
pose are generated from one source of truth.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np


class SpriteError(Exception):
    pass


PARTS = ("torso", "head", "arm_l", "arm_r", "leg_l", "leg_r")
PATTERNS = ("solid", "stripe", "dot")

# articulation limits, radians: (torso_lean, head_tilt, arm_l, arm_r, leg_l, leg_r)
ANGLE_LIMITS = (
    (-0.45, 0.45),
    (-0.6, 0.6),
    (-2.2, 2.2),
    (-2.2, 2.2),
    (-0.9, 0.9),
    (-0.9, 0.9),
)

MIN_COLOR_SEPARATION = 0.2


@dataclass(frozen=True)
class Appearance:
    background: tuple[float, float, float]
    torso: tuple[float, float, float]
    head: tuple[float, float, float]
    limbs: tuple[tuple[float, float, float], ...]  # arm_l, arm_r, leg_l, leg_r
    pattern: str = "solid"

    def palette(self) -> np.ndarray:
        return np.array([self.background, self.torso, self.head, *self.limbs])

    def vector(self) -> tuple:
        return tuple(np.round(self.palette().ravel(), 9)) + (self.pattern,)


@dataclass(frozen=True)
class Pose:
    angles: tuple[float, ...]  # order matches ANGLE_LIMITS
    root: tuple[float, float] = (0.5, 0.64)
    scale: float = 1.0


@dataclass(frozen=True)
class PuppetSpec:
    appearance: Appearance
    pose: Pose
    seed: int = 0


def _validate(spec: PuppetSpec) -> None:
    if len(spec.pose.angles) != 6:
        raise SpriteError("pose needs 6 joint angles")
    for a, (lo, hi) in zip(spec.pose.angles, ANGLE_LIMITS):
        if not (lo <= a <= hi):
            raise SpriteError(f"joint angle {a} outside articulation limit [{lo}, {hi}]")
    if spec.pose.scale < 0:
        raise SpriteError("scale must be >= 0")
    if spec.appearance.pattern not in PATTERNS:
        raise SpriteError(f"pattern {spec.appearance.pattern!r} not in {PATTERNS}")


def _skeleton(pose: Pose) -> dict[str, tuple[np.ndarray, np.ndarray, float]]:
    """Part name -> (endpoint a, endpoint b, capsule radius) in [0,1] canvas coords."""
    lean, tilt, arm_l, arm_r, leg_l, leg_r = pose.angles
    s = pose.scale
    root = np.array(pose.root)

    def polar(origin, angle, length):
        # angle 0 points straight up for torso/head, straight down for limbs
        return origin + length * np.array([np.sin(angle), -np.cos(angle)])

    hip = root
    torso_top = polar(hip, lean, 0.26 * s)
    neck_end = polar(torso_top, lean + tilt, 0.11 * s)
    shoulder = polar(hip, lean, 0.22 * s)

    def down(origin, angle, length):
        return origin + length * np.array([np.sin(angle), np.cos(angle)])

    return {
        "torso": (hip, torso_top, 0.075 * s),
        "head": (neck_end, neck_end, 0.085 * s),
        "arm_l": (shoulder, down(shoulder, arm_l - 0.35, 0.19 * s), 0.034 * s),
        "arm_r": (shoulder, down(shoulder, arm_r + 0.35, 0.19 * s), 0.034 * s),
        "leg_l": (hip, down(hip, leg_l - 0.12, 0.21 * s), 0.042 * s),
        "leg_r": (hip, down(hip, leg_r + 0.12, 0.21 * s), 0.042 * s),
    }


def _pixel_grid(res: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(res) + 0.5) / res
    return np.meshgrid(c, c)  # xx, yy with [row, col] indexing


def _capsule_distance(xx, yy, a, b, res) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    px = xx - a[0]
    py = yy - a[1]
    if denom == 0.0:
        return np.sqrt(px * px + py * py)
    t = np.clip((px * ab[0] + py * ab[1]) / denom, 0.0, 1.0)
    dx = px - t * ab[0]
    dy = py - t * ab[1]
    return np.sqrt(dx * dx + dy * dy)


def part_coverage(spec: PuppetSpec, res: int) -> dict[str, np.ndarray]:
    """Anti-aliased coverage in [0,1] per part; empty dict drawing at scale 0."""
    _validate(spec)
    if res not in (32, 64):
        raise SpriteError(f"resolution must be 32 or 64, got {res}")
    if spec.pose.scale == 0.0:
        return {name: np.zeros((res, res)) for name in PARTS}
    xx, yy = _pixel_grid(res)
    aa = 1.0 / res
    out = {}
    for name, (a, b, radius) in _skeleton(spec.pose).items():
        d = _capsule_distance(xx, yy, np.asarray(a), np.asarray(b), res)
        out[name] = np.clip(0.5 + (radius - d) / aa, 0.0, 1.0)
    return out


def _pattern_field(appearance: Appearance, res: int) -> np.ndarray:
    """Multiplicative torso texture in [0.8, 1]; solid is all ones."""
    if appearance.pattern == "solid":
        return np.ones((res, res))
    xx, yy = _pixel_grid(res)
    if appearance.pattern == "stripe":
        return 1.0 - 0.2 * (np.sin(yy * res * np.pi / 2.2) > 0)
    phase = (np.sin(xx * res * np.pi / 2.0) * np.sin(yy * res * np.pi / 2.0)) > 0.4
    return 1.0 - 0.2 * phase


def render(spec: PuppetSpec, res: int = 32) -> np.ndarray:
    """[3, H, W] image in [0, 1]; a pure function of the spec."""
    cov = part_coverage(spec, res)
    img = np.empty((3, res, res))
    img[:] = np.asarray(spec.appearance.background)[:, None, None]
    colors = {
        "torso": spec.appearance.torso,
        "head": spec.appearance.head,
        "arm_l": spec.appearance.limbs[0],
        "arm_r": spec.appearance.limbs[1],
        "leg_l": spec.appearance.limbs[2],
        "leg_r": spec.appearance.limbs[3],
    }
    pattern = _pattern_field(spec.appearance, res)
    # painter order: legs, arms, torso, head
    for name in ("leg_l", "leg_r", "arm_l", "arm_r", "torso", "head"):
        c = np.asarray(colors[name])[:, None, None] * (pattern if name == "torso" else 1.0)
        img = img * (1.0 - cov[name]) + c * cov[name]
    return img


def render_pose(spec: PuppetSpec, res: int = 32) -> np.ndarray:
    """[6, H, W] skeleton line channels with anti-aliased falloff, one per part."""
    _validate(spec)
    if res not in (32, 64):
        raise SpriteError(f"resolution must be 32 or 64, got {res}")
    out = np.zeros((len(PARTS), res, res))
    if spec.pose.scale == 0.0:
        return out
    xx, yy = _pixel_grid(res)
    width = 0.75 / res
    for i, name in enumerate(PARTS):
        a, b, _ = _skeleton(spec.pose)[name]
        d = _capsule_distance(xx, yy, np.asarray(a), np.asarray(b), res)
        out[i] = np.clip(1.0 - d / width, 0.0, 1.0)
    return out


def part_masks(spec: PuppetSpec, res: int = 32, solid: float = 0.9) -> dict[str, np.ndarray]:
    """Binary per-part masks of pixels owned by each part after painter overdraw."""
    cov = part_coverage(spec, res)
    owner = np.full((res, res), -1)
    for idx, name in enumerate(("leg_l", "leg_r", "arm_l", "arm_r", "torso", "head")):
        owner[cov[name] >= solid] = idx
    order = ("leg_l", "leg_r", "arm_l", "arm_r", "torso", "head")
    return {name: (owner == i).astype(np.float64) for i, name in enumerate(order)}


def garment_mask(spec: PuppetSpec, res: int = 32) -> np.ndarray:
    """Binary torso-region mask (the try-on generation region)."""
    cov = part_coverage(spec, res)
    return (cov["torso"] >= 0.5).astype(np.float64)


# ------------------------------------------------------------------ sampling


def sample_identity(seed: int) -> Appearance:
    """Seeded palette with every color pair at least 0.2 apart in RGB L2."""
    rng = np.random.default_rng(np.random.SeedSequence([77, seed]))
    while True:
        colors = rng.random((7, 3))
        d = np.linalg.norm(colors[:, None, :] - colors[None, :, :], axis=-1)
        d[np.diag_indices(7)] = np.inf
        if d.min() >= MIN_COLOR_SEPARATION:
            break
    pattern = PATTERNS[int(rng.integers(len(PATTERNS)))]
    return Appearance(
        background=tuple(colors[0]),
        torso=tuple(colors[1]),
        head=tuple(colors[2]),
        limbs=tuple(tuple(c) for c in colors[3:7]),
        pattern=pattern,
    )


def _sample_pose(rng: np.random.Generator) -> Pose:
    angles = tuple(rng.uniform(lo * 0.9, hi * 0.9) for lo, hi in ANGLE_LIMITS)
    root = (float(rng.uniform(0.44, 0.56)), float(rng.uniform(0.60, 0.68)))
    scale = float(rng.uniform(0.9, 1.1))
    return Pose(angles=angles, root=root, scale=scale)


MAX_FRAME_DELTA = 0.15  # rad, consecutive-frame joint motion bound


@dataclass(frozen=True)
class Sample:
    """One identity: a reference spec plus K target specs sharing its appearance."""

    seed: int
    appearance: Appearance
    reference: PuppetSpec
    targets: tuple[PuppetSpec, ...]


def sample_sequence(seed: int, k: int = 1) -> Sample:
    if k < 1:
        raise SpriteError("need at least one target frame")
    rng = np.random.default_rng(np.random.SeedSequence([101, seed]))
    app = sample_identity(seed)
    ref = PuppetSpec(appearance=app, pose=_sample_pose(rng), seed=seed)
    targets = []
    pose = _sample_pose(rng)
    for _ in range(k):
        targets.append(PuppetSpec(appearance=app, pose=pose, seed=seed))
        step = rng.uniform(-0.12, 0.12, size=6)
        angles = tuple(
            float(np.clip(a + d, lo, hi))
            for a, d, (lo, hi) in zip(pose.angles, step, ANGLE_LIMITS)
        )
        pose = replace(pose, angles=angles)
    return Sample(seed=seed, appearance=app, reference=ref, targets=tuple(targets))


def jitter_reference(spec: PuppetSpec, rng: np.random.Generator) -> PuppetSpec:
    """Training-time reference augmentation: +-10% scale and a small shift."""
    pose = spec.pose
    scale = float(np.clip(pose.scale * rng.uniform(0.9, 1.1), 0.0, 1.25))
    root = (
        float(np.clip(pose.root[0] + rng.uniform(-0.03, 0.03), 0.40, 0.60)),
        float(np.clip(pose.root[1] + rng.uniform(-0.03, 0.03), 0.58, 0.70)),
    )
    return replace(spec, pose=replace(pose, scale=scale, root=root))


TRAIN_SEED_BASE = 0
TEST_SEED_BASE = 10_000_000


def split_seeds(n_train: int, n_test: int, seed: int = 0) -> tuple[list[int], list[int]]:
    """Disjoint identity seed ranges for train and test."""
    train = [TRAIN_SEED_BASE + seed * 100_000 + i for i in range(n_train)]
    test = [TEST_SEED_BASE + seed * 100_000 + i for i in range(n_test)]
    return train, test


# ------------------------------------------------------------------ binary formats

TENSOR_MAGIC = b"SCDTENS1"
_DTYPE_CODES = {0: np.float32, 1: np.float64}
_DTYPE_IDS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_tensor(path: Path, arr: np.ndarray) -> None:
    """Flat little-endian tensor blob: magic, ndim, dims, dtype code, payload."""
    arr = np.asarray(arr)
    code = _DTYPE_IDS.get(arr.dtype)
    if code is None:
        arr = arr.astype(np.float32)
        code = 0
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(struct.pack("<I", code))
        f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != TENSOR_MAGIC:
            raise SpriteError(f"{path}: bad tensor magic {magic!r}")
        (ndim,) = struct.unpack("<I", f.read(4))
        dims = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
        (code,) = struct.unpack("<I", f.read(4))
        if code not in _DTYPE_CODES:
            raise SpriteError(f"{path}: unknown dtype code {code}")
        dt = np.dtype(_DTYPE_CODES[code]).newbyteorder("<")
        payload = np.frombuffer(f.read(), dtype=dt)
    return payload.reshape(dims).astype(_DTYPE_CODES[code])


def write_ppm(path: Path, img: np.ndarray) -> None:
    """8-bit binary PPM (P6) from a [3, H, W] float image in [0, 1]."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise SpriteError(f"expected [3, H, W] image, got {img.shape}")
    byte = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = byte.shape[1:]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(byte.transpose(1, 2, 0).tobytes())


def read_ppm(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P6"):
        raise SpriteError(f"{path}: not a binary PPM")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(v) for v in fields)
    if maxval != 255:
        raise SpriteError(f"{path}: unsupported maxval {maxval}")
    pix = np.frombuffer(data, dtype=np.uint8, offset=pos, count=w * h * 3)
    return pix.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


# ------------------------------------------------------------------ dataset export


def export_dataset(
    out_dir: Path,
    seed: int,
    n_train: int,
    n_test: int,
    res: int = 32,
    frames: int = 1,
    force: bool = False,
) -> Path:
    """Write images, pose tensors, masks, and the manifest; idempotent for fixed args."""
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise SpriteError(f"{out_dir} exists; pass force to overwrite")
    out_dir.mkdir(parents=True, exist_ok=True)
    train, test = split_seeds(n_train, n_test, seed)
    manifest = {
        "seed": seed,
        "resolution": res,
        "frames": frames,
        "splits": {"train": train, "test": test},
        "format": {
            "image": "binary PPM (P6), 8-bit",
            "pose": "SCDTENS1 little-endian float32 [6, H, W]",
            "mask": "SCDTENS1 little-endian float32 [H, W], torso region",
        },
    }
    for split, seeds in (("train", train), ("test", test)):
        for i, s in enumerate(seeds):
            sample = sample_sequence(s, frames)
            stem = out_dir / f"{split}_{i:05d}"
            write_ppm(Path(f"{stem}_ref.ppm"), render(sample.reference, res))
            write_tensor(Path(f"{stem}_ref_pose.bin"), render_pose(sample.reference, res))
            for j, tgt in enumerate(sample.targets):
                write_ppm(Path(f"{stem}_tgt{j:02d}.ppm"), render(tgt, res))
                write_tensor(Path(f"{stem}_tgt{j:02d}_pose.bin"), render_pose(tgt, res))
                write_tensor(Path(f"{stem}_tgt{j:02d}_mask.bin"), garment_mask(tgt, res))
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out_dir


class SpriteDataset:
    """Reader over an exported directory; specs re-derived from manifest seeds."""

    def __init__(self, root: Path):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise SpriteError(f"no manifest.json under {self.root}")
        self.manifest = json.loads(manifest_path.read_text())
        self.res = int(self.manifest["resolution"])
        self.frames = int(self.manifest["frames"])

    def seeds(self, split: str) -> list[int]:
        return list(self.manifest["splits"][split])

    def __len__(self) -> int:
        return len(self.seeds("train"))

    def sample_spec(self, split: str, index: int) -> Sample:
        return sample_sequence(self.seeds(split)[index], self.frames)

    def load(self, split: str, index: int) -> dict:
        stem = self.root / f"{split}_{index:05d}"
        item = {
            "ref_image": read_ppm(Path(f"{stem}_ref.ppm")),
            "ref_pose": read_tensor(Path(f"{stem}_ref_pose.bin")),
            "targets": [],
            "spec": self.sample_spec(split, index),
        }
        for j in range(self.frames):
            item["targets"].append({
                "image": read_ppm(Path(f"{stem}_tgt{j:02d}.ppm")),
                "pose": read_tensor(Path(f"{stem}_tgt{j:02d}_pose.bin")),
                "mask": read_tensor(Path(f"{stem}_tgt{j:02d}_mask.bin")),
            })
        return item


def to_model_space(img: np.ndarray) -> np.ndarray:
    """[0, 1] image -> [-1, 1] model space."""
    return img * 2.0 - 1.0


def from_model_space(x: np.ndarray) -> np.ndarray:
    return np.clip((x + 1.0) / 2.0, 0.0, 1.0)
