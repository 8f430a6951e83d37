"""Synthetic aerial-like scenes, bi-temporal change pairs, patching and dataset I/O.

Images live in memory as float32 (3, H, W) arrays in [0, 1]; masks as uint8
(H, W) in {0, 1}.  On disk images are 8-bit RGB PNGs and masks 8-bit
single-channel PNGs in {0, 255}.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter, zoom
from skimage.draw import ellipse, line

from .errors import ConfigError, DataError

ROOF_COLORS = np.array([
    [0.72, 0.32, 0.26],   # terracotta
    [0.80, 0.80, 0.78],   # light concrete
    [0.35, 0.42, 0.62],   # blue metal
    [0.55, 0.52, 0.50],   # dark concrete
    [0.85, 0.70, 0.45],   # sand
])
VEG_COLOR = np.array([0.18, 0.38, 0.16])
ROAD_COLOR = np.array([0.42, 0.42, 0.44])
SOIL = np.array([0.58, 0.48, 0.36])
GRASS = np.array([0.36, 0.52, 0.28])


@dataclass
class SceneObject:
    oid: int
    kind: str           # "road" | "vegetation" | "building"
    color: np.ndarray
    rows: np.ndarray
    cols: np.ndarray

    def footprint(self, size: int) -> np.ndarray:
        m = np.zeros((size, size), dtype=bool)
        m[self.rows, self.cols] = True
        return m

    def shifted(self, dy: int, dx: int, size: int) -> "SceneObject":
        r, c = self.rows + dy, self.cols + dx
        keep = (r >= 0) & (r < size) & (c >= 0) & (c < size)
        return replace(self, rows=r[keep], cols=c[keep])


@dataclass
class Scene:
    size: int
    background: np.ndarray                       # (3, H, W)
    objects: list = field(default_factory=list)  # paint order
    next_id: int = 0


@dataclass
class CdSample:
    img_a: np.ndarray
    img_b: np.ndarray
    mask: np.ndarray
    id: str

    def __post_init__(self):
        h, w = self.mask.shape
        if self.img_a.shape[1:] != (h, w) or self.img_b.shape[1:] != (h, w):
            raise DataError(f"sample {self.id}: image/mask sizes disagree")


# -- scene generation ------------------------------------------------------------

def _terrain(rng, size):
    coarse = rng.random((size // 8 + 1, size // 8 + 1))
    field_ = zoom(coarse, size / coarse.shape[0], order=3)[:size, :size]
    field_ = (field_ - field_.min()) / (np.ptp(field_) + 1e-9)
    img = SOIL[:, None, None] * (1 - field_) + GRASS[:, None, None] * field_
    texture = gaussian_filter(rng.standard_normal((3, size, size)), sigma=(0, 0.8, 0.8))
    return np.clip(img + 0.04 * texture, 0, 1)


def _rect(rng, size, min_side=6, max_side=14):
    h, w = rng.integers(min_side, max_side + 1, size=2)
    r0 = rng.integers(0, size - h + 1)
    c0 = rng.integers(0, size - w + 1)
    rr, cc = np.mgrid[r0:r0 + h, c0:c0 + w]
    return rr.ravel(), cc.ravel()


def _new_building(scene: Scene, rng) -> SceneObject:
    rows, cols = _rect(rng, scene.size)
    color = ROOF_COLORS[rng.integers(len(ROOF_COLORS))] + rng.normal(0, 0.03, 3)
    obj = SceneObject(scene.next_id, "building", np.clip(color, 0, 1), rows, cols)
    scene.next_id += 1
    return obj


def _road(scene: Scene, rng) -> SceneObject:
    s = scene.size
    pts = rng.integers(0, s, size=(3, 2))
    if rng.random() < 0.5:
        pts[0, 0], pts[-1, 0] = 0, s - 1
    else:
        pts[0, 1], pts[-1, 1] = 0, s - 1
    m = np.zeros((s, s), dtype=bool)
    for (r0, c0), (r1, c1) in zip(pts[:-1], pts[1:]):
        rr, cc = line(r0, c0, r1, c1)
        for d in (0, 1):
            m[np.clip(rr + d, 0, s - 1), cc] = True
            m[rr, np.clip(cc + d, 0, s - 1)] = True
    rows, cols = np.nonzero(m)
    obj = SceneObject(scene.next_id, "road", ROAD_COLOR + rng.normal(0, 0.02, 3), rows, cols)
    scene.next_id += 1
    return obj


def _blob(scene: Scene, rng) -> SceneObject:
    s = scene.size
    rr, cc = ellipse(rng.integers(0, s), rng.integers(0, s), rng.integers(3, 8), rng.integers(3, 8),
                     shape=(s, s), rotation=rng.uniform(0, np.pi))
    obj = SceneObject(scene.next_id, "vegetation", np.clip(VEG_COLOR + rng.normal(0, 0.03, 3), 0, 1), rr, cc)
    scene.next_id += 1
    return obj


def make_scene(rng: np.random.Generator, size: int) -> Scene:
    scene = Scene(size, _terrain(rng, size))
    scene.objects += [_road(scene, rng) for _ in range(rng.integers(1, 3))]
    scene.objects += [_blob(scene, rng) for _ in range(rng.integers(2, 5))]
    scene.objects += [_new_building(scene, rng) for _ in range(rng.integers(3, 8))]
    return scene


def render(scene: Scene, objects=None) -> tuple[np.ndarray, np.ndarray]:
    """Paint objects over the background; returns (image, membership id map)."""
    objects = scene.objects if objects is None else objects
    img = scene.background.copy()
    member = np.full((scene.size, scene.size), -1, dtype=np.int64)
    for obj in objects:
        img[:, obj.rows, obj.cols] = obj.color[:, None]
        member[obj.rows, obj.cols] = obj.oid
        if obj.kind == "building":
            # One-pixel shadow on the lower/right edge gives roofs some structure.
            edge_r = obj.rows == obj.rows.max()
            edge_c = obj.cols == obj.cols.max()
            e = edge_r | edge_c
            img[:, obj.rows[e], obj.cols[e]] *= 0.7
    return img, member


def photometric_jitter(img: np.ndarray, rng, strength: float = 1.0) -> np.ndarray:
    """Global illumination change: per-channel gain, contrast and brightness."""
    gain = 1 + strength * rng.uniform(-0.2, 0.2, size=(3, 1, 1))
    contrast = 1 + strength * rng.uniform(-0.25, 0.25)
    bright = strength * rng.uniform(-0.12, 0.12)
    mu = img.mean(axis=(1, 2), keepdims=True)
    out = (img - mu) * contrast + mu
    return np.clip(out * gain + bright, 0, 1)


def _sensor_noise(img, rng, sigma=0.015):
    return np.clip(img + rng.normal(0, sigma, img.shape), 0, 1)


# -- public generators -------------------------------------------------------------

def synth_image(seed: int, index: int, size: int = 64) -> np.ndarray:
    if size % 16:
        raise ConfigError(f"image size must be divisible by 16, got {size}")
    rng = np.random.default_rng([int(seed), int(index), 0])
    scene = make_scene(rng, size)
    img, _ = render(scene)
    img = photometric_jitter(img, rng, strength=rng.uniform(0, 1))
    return _sensor_noise(img, rng).astype(np.float32)


def synth_pretrain_corpus(n: int, size: int = 64, seed: int = 0):
    """Yield ``n`` unlabeled scenes; image ``i`` depends only on (seed, i)."""
    for i in range(n):
        yield synth_image(seed, i, size)


def _edit(scene: Scene, objects: list, rng) -> list | None:
    buildings = [o for o in objects if o.kind == "building"]
    op = rng.choice(["add", "remove", "move"]) if buildings else "add"
    if op == "add":
        return objects + [_new_building(scene, rng)]
    victim = buildings[rng.integers(len(buildings))]
    if op == "remove":
        return [o for o in objects if o.oid != victim.oid]
    dy, dx = rng.integers(-12, 13, size=2)
    if abs(dy) < 4 and abs(dx) < 4:
        dx = 6
    moved = victim.shifted(int(dy), int(dx), scene.size)
    if moved.rows.size == 0:
        return None
    return [o for o in objects if o.oid != victim.oid] + [moved]


def membership_change(scene: Scene, before: list, after: list) -> np.ndarray:
    _, ma = render(scene, before)
    _, mb = render(scene, after)
    return ma != mb


def make_pair(rng, size: int, change_rate: float, jitter: float = 1.0):
    """Return (img_a, img_b, mask, scene, objects_a, objects_b)."""
    scene = make_scene(rng, size)
    objs_a = list(scene.objects)
    objs_b = list(objs_a)
    target = change_rate * size * size
    changed = 0
    for _ in range(60):
        if change_rate <= 0 or changed >= target:
            break
        cand = _edit(scene, objs_b, rng)
        if cand is None:
            continue
        n = int(membership_change(scene, objs_a, cand).sum())
        # Accept edits that make progress without overshooting more than the
        # current shortfall.
        if n > changed and n - target <= target - changed:
            objs_b, changed = cand, n
    img_a, _ = render(scene, objs_a)
    img_b, _ = render(scene, objs_b)
    mask = membership_change(scene, objs_a, objs_b).astype(np.uint8)
    img_b = photometric_jitter(img_b, rng, strength=jitter)
    # Seasonal tint on vegetation: visible, but not a semantic change.
    veg = np.zeros((size, size), dtype=bool)
    for o in objs_b:
        if o.kind == "vegetation":
            veg[o.rows, o.cols] = True
    img_b[:, veg] = np.clip(img_b[:, veg] + rng.uniform(-0.08, 0.08, size=(3, 1)), 0, 1)
    img_a = _sensor_noise(img_a, rng)
    img_b = _sensor_noise(img_b, rng)
    return img_a.astype(np.float32), img_b.astype(np.float32), mask, scene, objs_a, objs_b


def synth_cd_dataset(n: int, size: int = 64, change_rate: float = 0.1, seed: int = 0,
                     start: int = 0) -> list:
    """``n`` bi-temporal samples; sample ``i`` depends only on (seed, start + i)."""
    if not 0 <= change_rate <= 1:
        raise ConfigError(f"change_rate must lie in [0, 1], got {change_rate}")
    if size % 16:
        raise ConfigError(f"image size must be divisible by 16, got {size}")
    out = []
    for i in range(start, start + n):
        rng = np.random.default_rng([int(seed), int(i), 1])
        a, b, m, *_ = make_pair(rng, size, change_rate)
        out.append(CdSample(a, b, m, f"synth_{seed}_{i:05d}"))
    return out


# -- normalization and patching ----------------------------------------------------------

def normalize(x: np.ndarray) -> np.ndarray:
    """[0, 1] -> [-1, 1]."""
    return (np.asarray(x, dtype=np.float32) * 2.0 - 1.0).astype(np.float32)


def denormalize(x: np.ndarray) -> np.ndarray:
    return ((np.asarray(x, dtype=np.float32) + 1.0) * 0.5).astype(np.float32)


def patchify(sample: CdSample, patch_size: int) -> list:
    """Non-overlapping tiles; sizes that don't divide evenly are reflect-padded first."""
    h, w = sample.mask.shape
    ph, pw = (-h) % patch_size, (-w) % patch_size
    a, b, m = sample.img_a, sample.img_b, sample.mask
    if ph or pw:
        a = np.pad(a, ((0, 0), (0, ph), (0, pw)), mode="reflect")
        b = np.pad(b, ((0, 0), (0, ph), (0, pw)), mode="reflect")
        m = np.pad(m, ((0, ph), (0, pw)), mode="reflect")
    out = []
    for i in range(0, m.shape[0], patch_size):
        for j in range(0, m.shape[1], patch_size):
            sl = (slice(i, i + patch_size), slice(j, j + patch_size))
            out.append(CdSample(a[:, sl[0], sl[1]].copy(), b[:, sl[0], sl[1]].copy(), m[sl].copy(),
                                f"{sample.id}_r{i // patch_size}_c{j // patch_size}"))
    return out


def unpatchify(patches: list, rows: int, cols: int, sample_id: str = "") -> CdSample:
    grid = [patches[r * cols:(r + 1) * cols] for r in range(rows)]
    a = np.concatenate([np.concatenate([p.img_a for p in row], axis=2) for row in grid], axis=1)
    b = np.concatenate([np.concatenate([p.img_b for p in row], axis=2) for row in grid], axis=1)
    m = np.concatenate([np.concatenate([p.mask for p in row], axis=1) for row in grid], axis=0)
    return CdSample(a, b, m, sample_id)


# -- image I/O ----------------------------------------------------------------------------

def save_image(path, img: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(img).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (FileNotFoundError, OSError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None
    return arr.transpose(2, 0, 1).copy()


def save_mask(path, mask: np.ndarray) -> None:
    m = np.asarray(mask)
    if not np.all((m == 0) | (m == 1)):
        raise DataError(f"mask for {path} is not binary")
    Image.fromarray((m.astype(np.uint8) * 255), mode="L").save(path)


def load_mask(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L") if im.mode not in ("L", "1") else im, dtype=np.uint8)
    except (FileNotFoundError, OSError) as exc:
        raise DataError(f"cannot read label {path}: {exc}") from None
    bad = np.setdiff1d(np.unique(arr), [0, 255])
    if bad.size:
        raise DataError(f"label {path} contains value {int(bad[0])}; only 0 and 255 are allowed")
    return (arr == 255).astype(np.uint8)


# -- manifest datasets -----------------------------------------------------------------------

SPLITS = ("train", "val", "test")


@dataclass
class DatasetManifest:
    root: str
    splits: dict
    patch_size: int | None = None

    def paths(self, sample_id: str) -> tuple[str, str, str]:
        return tuple(_resolve(self.root, d, sample_id) for d in ("A", "B", "label"))

    def load_split(self, split: str) -> list:
        out = []
        for sid in self.splits[split]:
            pa, pb, pl = self.paths(sid)
            s = CdSample(load_image(pa), load_image(pb), load_mask(pl), os.path.splitext(sid)[0])
            if self.patch_size and s.mask.shape != (self.patch_size, self.patch_size):
                out.extend(patchify(s, self.patch_size))
            else:
                out.append(s)
        return out


def _resolve(root, sub, sid):
    p = os.path.join(root, sub, sid)
    if os.path.isfile(p):
        return p
    if os.path.isfile(p + ".png"):
        return p + ".png"
    raise DataError(f"missing file for id {sid!r}: {p}")


def load_manifest(root, patch_size: int | None = None, check_labels: bool = True) -> DatasetManifest:
    """Validate an ``A/ B/ label/`` dataset with train/val/test id lists."""
    splits = {}
    for name in SPLITS:
        path = os.path.join(root, f"{name}.txt")
        if not os.path.isfile(path):
            raise DataError(f"missing split file {path}")
        with open(path) as fh:
            splits[name] = [ln.strip() for ln in fh if ln.strip()]
    seen = {}
    for name, ids in splits.items():
        for sid in ids:
            if sid in seen and seen[sid] != name:
                raise DataError(f"id {sid!r} appears in both {seen[sid]} and {name} splits")
            seen[sid] = name
    man = DatasetManifest(str(root), splits, patch_size)
    for sid in seen:
        _, _, label = man.paths(sid)  # raises on any missing file
        if check_labels:
            load_mask(label)
    return man


def write_manifest(root, splits: dict) -> DatasetManifest:
    """Write ``{split: [CdSample, ...]}`` as a manifest dataset."""
    for sub in ("A", "B", "label"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    for name in SPLITS:
        samples = splits.get(name, [])
        for s in samples:
            save_image(os.path.join(root, "A", f"{s.id}.png"), s.img_a)
            save_image(os.path.join(root, "B", f"{s.id}.png"), s.img_b)
            save_mask(os.path.join(root, "label", f"{s.id}.png"), s.mask)
        with open(os.path.join(root, f"{name}.txt"), "w") as fh:
            fh.write("".join(f"{s.id}.png\n" for s in samples))
    return load_manifest(root)
