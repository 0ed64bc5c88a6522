"""Canonical sample layout, directory loader, augmentation, synthetic scenes.

Layout of a dataset root::

    images/<id>.png        RGB frames at native resolution
    fixations/<id>.txt     one "x y" pair per line, 0-based, native pixels
    manifest.ini           [dataset] sigma/height/width, [splits] id lists

Gaze from several providers is merged into one fixation list per frame.
"""
from __future__ import annotations

import configparser
import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .errors import DatasetError, EmptySplitWarning, ShapeError
from .saliency import FixationMap, SaliencyMap, default_sigma, make_gt

MANIFEST = "manifest.ini"


@dataclass(frozen=True)
class Sample:
    id: str
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    fixations: tuple[tuple[int, int], ...]
    sigma: float
    gt_override: SaliencyMap | None = field(default=None, repr=False, compare=False)

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]

    @cached_property
    def fixation_map(self) -> FixationMap:
        return FixationMap.from_points(self.fixations, self.height, self.width)

    @cached_property
    def gt(self) -> SaliencyMap:
        if self.gt_override is not None:
            return self.gt_override
        return make_gt(self.fixation_map, self.sigma)


@dataclass
class DatasetManifest:
    root: Path
    split: str = "train"
    sigma: float | None = None
    resize: tuple[int, int] | None = None  # (H, W)

    def __post_init__(self):
        self.root = Path(self.root)
        if self.resize is not None:
            H, W = self.resize
            if H % 32 or W % 32:
                raise ShapeError(f"resize target {H}x{W} must be divisible by 32")


def read_manifest(root) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    path = Path(root) / MANIFEST
    if path.exists():
        cp.read(path)
    return cp


def write_manifest(root, splits: dict[str, list[str]], sigma: float | None = None, **extra):
    cp = configparser.ConfigParser()
    cp["dataset"] = {k: str(v) for k, v in extra.items()}
    if sigma is not None:
        cp["dataset"]["sigma"] = repr(float(sigma))
    cp["splits"] = {name: " ".join(ids) for name, ids in splits.items()}
    with open(Path(root) / MANIFEST, "w") as fh:
        cp.write(fh)


def read_fixations(path) -> list[tuple[int, int]]:
    pts = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        x, y = line.split()[:2]
        pts.append((int(round(float(x))), int(round(float(y)))))
    return pts


def write_fixations(path, points):
    Path(path).write_text("".join(f"{int(x)} {int(y)}\n" for x, y in points))


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image(path, image: np.ndarray):
    arr = np.clip(np.rint(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def rescale_points(points, src_hw, dst_hw):
    (H, W), (H2, W2) = src_hw, dst_hw
    return [(min(W2 - 1, x * W2 // W), min(H2 - 1, y * H2 // H)) for x, y in points]


def resize_image(image: np.ndarray, size_hw) -> np.ndarray:
    H2, W2 = size_hw
    if image.shape[1:] == (H2, W2):
        return image
    chans = [np.asarray(Image.fromarray(c).resize((W2, H2), Image.BILINEAR)) for c in image]
    return np.stack(chans).astype(np.float32)


def list_ids(manifest: DatasetManifest) -> list[str]:
    root = manifest.root
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    images = {p.stem for p in (root / "images").glob("*.png")} if (root / "images").is_dir() else set()
    fixes = {p.stem for p in (root / "fixations").glob("*.txt")} if (root / "fixations").is_dir() else set()
    orphans = sorted(f"images/{i}.png" for i in images - fixes) + sorted(f"fixations/{i}.txt" for i in fixes - images)
    if orphans:
        raise DatasetError("unmatched files: " + ", ".join(orphans))
    cp = read_manifest(root)
    if cp.has_section("splits"):
        if not cp.has_option("splits", manifest.split):
            raise DatasetError(f"split {manifest.split!r} not listed in {root / MANIFEST}")
        ids = cp.get("splits", manifest.split).split()
        missing = [i for i in ids if i not in images]
        if missing:
            raise DatasetError(f"split {manifest.split!r} lists ids without files: {missing}")
    else:
        ids = list(images)
    return sorted(ids)


def load_sample(root, sample_id: str, sigma: float | None = None, resize=None) -> Sample:
    root = Path(root)
    image = load_image(root / "images" / f"{sample_id}.png")
    points = read_fixations(root / "fixations" / f"{sample_id}.txt")
    H, W = image.shape[1:]
    for x, y in points:
        if not (0 <= x < W and 0 <= y < H):
            raise DatasetError(f"{sample_id}: fixation ({x}, {y}) outside {W}x{H} image")
    if resize is not None and tuple(resize) != (H, W):
        points = rescale_points(points, (H, W), resize)
        image = resize_image(image, resize)
    if sigma is None:
        sigma = default_sigma(image.shape[1])
    return Sample(sample_id, image, tuple(points), float(sigma))


def load_dataset(manifest: DatasetManifest) -> list[Sample]:
    """Load a split in lexicographic id order (independent of directory order)."""
    ids = list_ids(manifest)
    if not ids:
        warnings.warn(f"split {manifest.split!r} under {manifest.root} is empty", EmptySplitWarning, stacklevel=2)
        return []
    sigma = manifest.sigma
    if sigma is None:
        cp = read_manifest(manifest.root)
        if cp.has_option("dataset", "sigma"):
            sigma = cp.getfloat("dataset", "sigma")
    return [load_sample(manifest.root, i, sigma, manifest.resize) for i in ids]


def flip_sample(s: Sample) -> Sample:
    W = s.width
    flipped_gt = SaliencyMap(np.ascontiguousarray(s.gt.grid[:, ::-1]), s.gt.normalized)
    return replace(
        s,
        image=np.ascontiguousarray(s.image[:, :, ::-1]),
        fixations=tuple((W - 1 - x, y) for x, y in s.fixations),
        gt_override=flipped_gt,
    )


def color_jitter(image: np.ndarray, rng: np.random.Generator, strength: float = 0.2) -> np.ndarray:
    """Brightness, contrast and saturation factors each drawn from 1 +/- strength."""
    b, c, sat = rng.uniform(1 - strength, 1 + strength, size=3)
    img = image * b
    gray = (0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2])[None]
    img = (img - gray.mean()) * c + gray.mean()
    gray = (0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2])[None]
    img = gray + (img - gray) * sat
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def augment(s: Sample, rng: np.random.Generator, flip_prob: float = 0.5, jitter: float = 0.2,
            force_flip: bool | None = None) -> Sample:
    flip = rng.random() < flip_prob if force_flip is None else force_flip
    out = flip_sample(s) if flip else s
    if jitter > 0:
        out = replace(out, image=color_jitter(out.image, rng, jitter))
    return out


# --- synthetic road scenes ---------------------------------------------------

def synth_scene(rng: np.random.Generator, H: int, W: int):
    """One procedurally drawn road scene.

    Returns (image uint8 HxWx3, fixations, vanishing point). Fixations land
    near the vanishing point or on one of the drawn obstacles.
    """
    vx = W / 2 + rng.uniform(-W / 8, W / 8)
    vy = 0.4 * H + rng.uniform(-H / 16, H / 16)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    dist = np.hypot(xx - vx, yy - vy) / np.hypot(H, W)
    sky = np.stack([0.45 + 0.3 * (1 - yy / H), 0.6 + 0.2 * (1 - yy / H), 0.85 + 0 * yy], -1)
    ground = np.stack([0.25 + 0.3 * dist, 0.45 + 0.2 * dist, 0.2 + 0.1 * dist], -1)
    base = np.where((yy < vy)[..., None], sky, ground)
    img = Image.fromarray(np.clip(base * 255, 0, 255).astype(np.uint8), mode="RGB")
    draw = ImageDraw.Draw(img)
    draw.polygon([(vx, vy), (W * 0.05, H - 1), (W * 0.95, H - 1)], fill=(70, 70, 75))
    draw.line([(vx, vy), (W / 2, H - 1)], fill=(235, 235, 200), width=max(1, W // 64))
    boxes = []
    for _ in range(int(rng.integers(1, 4))):
        bw, bh = rng.uniform(W / 16, W / 6), rng.uniform(H / 16, H / 6)
        cx, cy = rng.uniform(bw / 2, W - bw / 2), rng.uniform(vy, H - bh / 2)
        color = tuple(int(c) for c in rng.integers(0, 256, size=3))
        draw.rectangle([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], fill=color)
        boxes.append((cx, cy))
    fixes = []
    for _ in range(int(rng.integers(1, 6))):
        if rng.random() < 0.7 or not boxes:
            fx, fy = rng.normal(vx, W / 48), rng.normal(vy, H / 48)
        else:
            bx, by = boxes[int(rng.integers(len(boxes)))]
            fx, fy = rng.normal(bx, 1.0), rng.normal(by, 1.0)
        fixes.append((int(np.clip(round(fx), 0, W - 1)), int(np.clip(round(fy), 0, H - 1))))
    return np.asarray(img), fixes, (vx, vy)


def synth_dataset(root, n: int, H: int = 64, W: int = 64, seed: int = 0, sigma: float | None = None,
                  splits: dict[str, float] | None = None) -> Path:
    """Write ``n`` synthetic samples in the canonical layout; reproducible from ``seed``.

    ``splits`` maps split names to fractions (default: everything in train).
    Planted vanishing points go to ``vanishing_points.txt``.
    """
    if n < 1:
        raise ValueError("synth_dataset needs n >= 1")
    root = Path(root)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "fixations").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot write dataset under {root}: {exc}") from exc
    rng = np.random.default_rng(seed)
    ids = [f"synth_{k:05d}" for k in range(n)]
    vps = []
    for sid in ids:
        img, fixes, vp = synth_scene(rng, H, W)
        Image.fromarray(img, mode="RGB").save(root / "images" / f"{sid}.png")
        write_fixations(root / "fixations" / f"{sid}.txt", fixes)
        vps.append(f"{sid} {vp[0]:.6f} {vp[1]:.6f}\n")
    (root / "vanishing_points.txt").write_text("".join(vps))
    fractions = splits or {"train": 1.0}
    split_ids, start = {}, 0
    names = list(fractions)
    for k, name in enumerate(names):
        stop = n if k == len(names) - 1 else start + int(round(fractions[name] * n))
        split_ids[name] = ids[start:stop]
        start = stop
    write_manifest(root, split_ids, sigma if sigma is not None else default_sigma(H), height=H, width=W, seed=seed)
    return root
