"""Image I/O, the procedural synthetic-rain corpus, and unpaired batching.

Pixel convention: 8-bit RGB PNG on disk, float32 (3, H, W) in [-1, 1] in
memory, mapped by v/127.5 - 1 on load and inverted with round-half-up
and clamping on save. PNG keeps the round trip lossless, which the
bit-exact persistence tests rely on.

The corpus generator writes three unpaired-by-construction groups from
disjoint seed ranges: training clean images, training rainy images
(built on clean bases never emitted as clean), and a held-out paired
eval split whose ground truth exists only for scoring. A tab-separated
manifest (path, role, seed) makes the provenance auditable.
"""

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

MANIFEST_NAME = "manifest.tsv"
ROLES = ("clean", "rainy", "eval_clean", "eval_rainy")


# ---------------------------------------------------------------------------
# PNG <-> value domain
# ---------------------------------------------------------------------------


def load_image(path) -> np.ndarray:
    """Read an 8-bit RGB PNG as float32 (3, H, W) in [-1, 1]."""
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise ValueError(
                f"{path}: mode {im.mode} is not RGB (convert('RGB') before saving)"
            )
        arr = np.asarray(im, dtype=np.float64)
    # divide in float64 so each level maps to the correctly rounded float32
    return np.ascontiguousarray((arr / 127.5 - 1.0).astype(np.float32).transpose(2, 0, 1))


def save_image(img: np.ndarray, path) -> None:
    """Write a (3, H, W) [-1, 1] image as 8-bit RGB PNG (round half up, clamp)."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected (3, H, W), got {img.shape}")
    v = (np.asarray(img, dtype=np.float64) + 1.0) * 127.5
    v = np.clip(np.floor(v + 0.5), 0, 255).astype(np.uint8)
    Image.fromarray(v.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RainSynthesisConfig:
    size: int = 32
    streak_count: tuple = (8, 18)
    angle_deg: tuple = (70.0, 110.0)  # measured from the horizontal axis
    length_px: tuple = (6.0, 16.0)
    thickness: float = 1.2
    intensity: tuple = (0.5, 0.9)  # additive brightness, [0, 1] units


def _smooth_base(rng, size):
    """Clean scene: low-frequency gradients plus a few solid shapes, kept
    away from white so bright rain streaks are unambiguous."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.zeros((3, size, size))
    for c in range(3):
        a, b = rng.uniform(-1, 1, 2)
        phase = rng.uniform(0, 2 * np.pi)
        freq = rng.uniform(0.5, 2.0)
        img[c] = 0.5 + 0.25 * (a * xx + b * yy) + 0.15 * np.sin(
            2 * np.pi * freq * (xx * rng.uniform(-1, 1) + yy * rng.uniform(-1, 1)) + phase
        )
    for _ in range(rng.integers(2, 5)):
        color = rng.uniform(0.1, 0.7, 3)
        cy, cx = rng.uniform(0, size, 2)
        if rng.random() < 0.5:
            r = rng.uniform(size * 0.1, size * 0.3)
            mask = (yy * size - cy) ** 2 + (xx * size - cx) ** 2 <= r * r
        else:
            h, w = rng.uniform(size * 0.15, size * 0.45, 2)
            mask = (np.abs(yy * size - cy) <= h / 2) & (np.abs(xx * size - cx) <= w / 2)
        img[:, mask] = color[:, None]
    return np.clip(img, 0.05, 0.75)


def _rain_layer(rng, cfg: RainSynthesisConfig):
    """Nonnegative additive streak layer: anti-aliased bright line segments."""
    size = cfg.size
    layer = np.zeros((size, size))
    n = int(rng.integers(cfg.streak_count[0], cfg.streak_count[1] + 1))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(n):
        angle = np.deg2rad(rng.uniform(*cfg.angle_deg))
        length = rng.uniform(*cfg.length_px)
        inten = rng.uniform(*cfg.intensity)
        cy, cx = rng.uniform(0, size, 2)
        dy, dx = np.sin(angle), np.cos(angle)
        # distance from each pixel to the segment [p0, p1]
        p0 = np.array([cy - dy * length / 2, cx - dx * length / 2])
        p1 = np.array([cy + dy * length / 2, cx + dx * length / 2])
        seg = p1 - p0
        denom = float(seg @ seg)
        ty = yy - p0[0]
        tx = xx - p0[1]
        tproj = np.clip((ty * seg[0] + tx * seg[1]) / denom, 0.0, 1.0)
        dist = np.hypot(ty - tproj * seg[0], tx - tproj * seg[1])
        contrib = inten * np.clip(1.0 - dist / cfg.thickness, 0.0, 1.0)
        layer = np.maximum(layer, contrib)
    return layer


def _make_pair(seed, cfg: RainSynthesisConfig):
    """(clean, rainy) in [0, 1]; rainy = clamp(clean + rain)."""
    rng = np.random.default_rng(seed)
    clean = _smooth_base(rng, cfg.size)
    rain = _rain_layer(rng, cfg)
    rainy = np.clip(clean + rain[None, :, :], 0.0, 1.0)
    return clean, rainy


def _to_signed(img01):
    return (img01 * 2.0 - 1.0).astype(np.float32)


def synth_corpus(cfg: RainSynthesisConfig, n_clean, n_rainy, n_eval, out_dir, seed=0):
    """Write the corpus and its manifest; returns the manifest path.

    Seeds are allocated in disjoint blocks (clean, rainy bases, eval
    pairs) derived from `seed`, so the three groups never share a base
    image and the whole corpus is reproducible byte for byte.
    """
    if n_clean < 1 or n_rainy < 1:
        raise ValueError("need at least one clean and one rainy image")
    out_dir = str(out_dir)
    for sub in ("clean", "rainy", "eval_clean", "eval_rainy"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    base = int(seed) * 1_000_000
    rows = []

    for i in range(n_clean):
        s = base + i
        clean, _ = _make_pair(s, cfg)
        rel = f"clean/c{i:04d}.png"
        save_image(_to_signed(clean), os.path.join(out_dir, rel))
        rows.append((rel, "clean", s))

    for i in range(n_rainy):
        s = base + 100_000 + i
        _, rainy = _make_pair(s, cfg)
        rel = f"rainy/r{i:04d}.png"
        save_image(_to_signed(rainy), os.path.join(out_dir, rel))
        rows.append((rel, "rainy", s))

    for i in range(n_eval):
        s = base + 200_000 + i
        clean, rainy = _make_pair(s, cfg)
        rel_c = f"eval_clean/e{i:04d}.png"
        rel_r = f"eval_rainy/e{i:04d}.png"
        save_image(_to_signed(clean), os.path.join(out_dir, rel_c))
        save_image(_to_signed(rainy), os.path.join(out_dir, rel_r))
        rows.append((rel_c, "eval_clean", s))
        rows.append((rel_r, "eval_rainy", s))

    manifest = os.path.join(out_dir, MANIFEST_NAME)
    with open(manifest, "w", encoding="utf-8") as fh:
        for rel, role, s in rows:
            fh.write(f"{rel}\t{role}\t{s}\n")
    return manifest


def read_manifest(corpus_dir):
    """List of (relative path, role, seed) rows."""
    rows = []
    with open(os.path.join(str(corpus_dir), MANIFEST_NAME), encoding="utf-8") as fh:
        for line in fh:
            rel, role, s = line.rstrip("\n").split("\t")
            if role not in ROLES:
                raise ValueError(f"manifest role {role!r} unknown")
            rows.append((rel, role, int(s)))
    return rows


# ---------------------------------------------------------------------------
# unpaired dataset
# ---------------------------------------------------------------------------


@dataclass
class UnpairedDataset:
    clean_paths: list
    rainy_paths: list
    resolution: int
    hflip: bool = True

    def __post_init__(self):
        if not self.clean_paths or not self.rainy_paths:
            raise ValueError("both clean and rainy lists must be non-empty")
        overlap = set(self.clean_paths) & set(self.rainy_paths)
        if overlap:
            raise ValueError(f"paths appear in both lists: {sorted(overlap)[:3]}")
        self._cache = {}

    def _load(self, path):
        img = self._cache.get(path)
        if img is None:
            img = load_image(path)
            self._cache[path] = img
        return img


def load_unpaired(corpus_dir, resolution, hflip=True) -> UnpairedDataset:
    corpus_dir = str(corpus_dir)
    rows = read_manifest(corpus_dir)
    clean = [os.path.join(corpus_dir, r) for r, role, _ in rows if role == "clean"]
    rainy = [os.path.join(corpus_dir, r) for r, role, _ in rows if role == "rainy"]
    return UnpairedDataset(clean, rainy, resolution, hflip)


def eval_pairs(corpus_dir):
    """[(rainy path, clean ground-truth path)] of the held-out split."""
    corpus_dir = str(corpus_dir)
    rows = read_manifest(corpus_dir)
    cleans = {r: os.path.join(corpus_dir, r) for r, role, _ in rows if role == "eval_clean"}
    pairs = []
    for rel, role, _ in rows:
        if role != "eval_rainy":
            continue
        mate = rel.replace("eval_rainy/", "eval_clean/")
        if mate not in cleans:
            raise ValueError(f"eval pair missing clean mate for {rel}")
        pairs.append((os.path.join(corpus_dir, rel), cleans[mate]))
    return pairs


def _fit_resolution(img, res, rng):
    C, H, W = img.shape
    if H < res or W < res:
        raise ValueError(f"image {H}x{W} smaller than training resolution {res}")
    if H == res and W == res:
        return img
    top = int(rng.integers(0, H - res + 1))
    left = int(rng.integers(0, W - res + 1))
    return img[:, top : top + res, left : left + res]


def next_batch(dataset: UnpairedDataset, batch_size: int, rng):
    """Draw one unpaired batch: independent uniform picks from each list,
    per-image coin-flip horizontal mirror, crop to the training
    resolution. All randomness comes from `rng`, so iteration order is a
    pure function of the stream state (checkpointable for exact resume).
    """
    res = dataset.resolution
    out = []
    for paths in (dataset.clean_paths, dataset.rainy_paths):
        idx = rng.integers(0, len(paths), size=batch_size)
        stack = np.empty((batch_size, 3, res, res), dtype=np.float32)
        for j, i in enumerate(idx):
            img = _fit_resolution(dataset._load(paths[i]), res, rng)
            if dataset.hflip and rng.random() < 0.5:
                img = img[:, :, ::-1]
            stack[j] = img
        out.append(stack)
    return out[0], out[1]
