"""Synthetic shape-and-texture segmentation benchmark with base/novel folds.

Every image shows one annotated object on a patchwork background. Training
images of fold ``f`` only carry base-class annotations; with probability
``distractor_probability`` they also contain an unannotated object of one of
fold ``f``'s novel classes (its mask is kept for diagnostics only). Test images
are clean unless ``query_clutter_probability`` adds an object of another class.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .io import config_hash, read_json, read_mask, read_ppm, write_json, write_pgm, write_ppm
from .validation import ConfigError, DataError

SHAPES = ("circle", "square", "triangle", "ring", "cross", "star", "bar", "ellipse")
PATTERNS = ("hstripes", "vstripes", "checker", "dstripes", "dots", "astripes", "fine_checker", "blotch")

# Each colour is shared by two classes so that texture, not hue alone, identifies a class.
PALETTE = np.array([
    [0.85, 0.25, 0.20], [0.20, 0.45, 0.85], [0.95, 0.80, 0.25], [0.30, 0.70, 0.35],
])
CLASS_COLORS = [(0, 1), (1, 2), (2, 3), (3, 0), (0, 2), (1, 3), (2, 0), (3, 1)]

BG_MATERIALS = np.array([
    [0.35, 0.55, 0.30],  # grass
    [0.80, 0.72, 0.55],  # sand
    [0.55, 0.70, 0.90],  # sky
    [0.50, 0.50, 0.52],  # concrete
    [0.45, 0.33, 0.25],  # soil
    [0.70, 0.62, 0.72],  # dusk
])


@dataclass
class SyntheticDatasetConfig:
    image_size: int = 64
    num_classes: int = 8
    images_per_class: int = 200
    test_per_class: int = 50
    folds: int = 4
    novel_per_fold: int = 2
    distractor_probability: float = 0.5
    query_clutter_probability: float = 0.0
    background_family: str = "patchwork"
    noise_sigma: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.folds * self.novel_per_fold > self.num_classes:
            raise ConfigError("folds x novel_per_fold must not exceed num_classes")
        if not 0.0 <= self.distractor_probability <= 1.0:
            raise ConfigError("distractor_probability must lie in [0, 1]")
        if not 0.0 <= self.query_clutter_probability <= 1.0:
            raise ConfigError("query_clutter_probability must lie in [0, 1]")
        if self.num_classes > len(SHAPES):
            raise ConfigError(f"at most {len(SHAPES)} classes are available")
        if self.image_size < 16 or self.image_size % 2:
            raise ConfigError("image_size must be even and >= 16")
        if self.test_per_class >= self.images_per_class:
            raise ConfigError("test_per_class must be smaller than images_per_class")

    def novel_classes(self, fold):
        # interleaved so each fold mixes shapes and colours
        stride = self.num_classes // self.novel_per_fold
        return [fold + i * stride for i in range(self.novel_per_fold)]

    def base_classes(self, fold):
        novel = set(self.novel_classes(fold))
        return [c for c in range(self.num_classes) if c not in novel]

    @property
    def train_per_class_per_fold(self):
        base_folds = self.folds - 1 if self.folds > 1 else 1
        return (self.images_per_class - self.test_per_class) // base_folds


def _pattern(kind, yy, xx, rng):
    phase = rng.uniform(0, 8)
    if kind == "hstripes":
        return ((yy + phase) // 2) % 2
    if kind == "vstripes":
        return ((xx + phase) // 2) % 2
    if kind == "checker":
        return ((yy + phase) // 3 + (xx + phase) // 3) % 2
    if kind == "dstripes":
        return ((yy + xx + phase) // 3) % 2
    if kind == "astripes":
        return ((yy - xx + 64 + phase) // 3) % 2
    if kind == "dots":
        return (((yy + phase) % 4 < 2) & ((xx + phase) % 4 < 2)).astype(float)
    if kind == "fine_checker":
        return (yy + xx) % 2
    if kind == "blotch":
        field_ = rng.normal(size=(yy.shape[0] // 4 + 2, yy.shape[1] // 4 + 2))
        from scipy.ndimage import zoom
        up = zoom(field_, 4, order=1)[: yy.shape[0], : yy.shape[1]]
        return (up > 0).astype(float)
    raise ValueError(kind)


def _shape_mask(shape, yy, xx, cy, cx, radius, angle):
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(angle) + dy * np.sin(angle)
    v = -dx * np.sin(angle) + dy * np.cos(angle)
    r = np.hypot(u, v)
    if shape == "circle":
        return r < radius
    if shape == "square":
        return np.maximum(np.abs(u), np.abs(v)) < radius * 0.8
    if shape == "triangle":
        return (v < radius * 0.5) & (np.sqrt(3) * u - v < radius) & (-np.sqrt(3) * u - v < radius)
    if shape == "ring":
        return (r < radius) & (r > radius * 0.5)
    if shape == "cross":
        arm = radius * 0.38
        return ((np.abs(u) < arm) & (np.abs(v) < radius)) | ((np.abs(v) < arm) & (np.abs(u) < radius))
    if shape == "star":
        theta = np.arctan2(v, u)
        return r < radius * (0.62 + 0.38 * np.cos(5 * theta))
    if shape == "bar":
        return (np.abs(u) < radius) & (np.abs(v) < radius * 0.42)
    if shape == "ellipse":
        return (u / radius) ** 2 + (v / (radius * 0.62)) ** 2 < 1
    raise ValueError(shape)


def _background(size, rng):
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    n_patches = int(rng.integers(2, 6))
    seeds = rng.uniform(0, size, size=(n_patches, 2))
    d = (yy[None] - seeds[:, 0, None, None]) ** 2 + (xx[None] - seeds[:, 1, None, None]) ** 2
    owner = d.argmin(axis=0)
    materials = rng.choice(len(BG_MATERIALS), size=n_patches, replace=True)
    img = np.zeros((size, size, 3))
    from scipy.ndimage import gaussian_filter
    for p in range(n_patches):
        base = BG_MATERIALS[materials[p]] + rng.normal(0, 0.04, size=3)
        shade = gaussian_filter(rng.normal(0, 1, size=(size, size)), 4) * 0.25
        sel = owner == p
        img[sel] = base + shade[sel, None]
    return img


def _render_object(img, cls, rng, avoid=None):
    size = img.shape[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    best = None
    for _ in range(20):
        radius = rng.uniform(size * 0.15, size * 0.25)
        cy, cx = rng.uniform(radius, size - radius, size=2)
        mask = _shape_mask(SHAPES[cls], yy, xx, cy, cx, radius, rng.uniform(0, np.pi))
        overlap = 0 if avoid is None else int((mask & avoid).sum())
        if best is None or overlap < best[0]:
            best = (overlap, mask)
        if overlap == 0:
            break
    mask = best[1]
    a, b = CLASS_COLORS[cls]
    ca = PALETTE[a] + rng.normal(0, 0.05, size=3)
    cb = PALETTE[b] + rng.normal(0, 0.05, size=3)
    t = _pattern(PATTERNS[cls], yy, xx, rng)[..., None]
    tex = ca * (1 - t) + cb * t
    img[mask] = tex[mask]
    return mask


def render_image(cls, rng, size=64, distractor=None, noise_sigma=0.03):
    """Returns ``(image, mask, distractor_mask)``."""
    img = _background(size, rng)
    dmask = np.zeros((size, size), dtype=bool)
    if distractor is not None:
        dmask = _render_object(img, distractor, rng)
    mask = _render_object(img, cls, rng, avoid=dmask)
    dmask &= ~mask
    img = np.clip(img + rng.normal(0, noise_sigma, size=img.shape), 0.0, 1.0)
    return img.astype(np.float32), mask, dmask


def generate_synthetic_dataset(config, out_dir):
    """Render the benchmark to ``out_dir`` (PPM images, PGM masks, ``index.json``)."""
    out = Path(out_dir)
    try:
        for sub in ("images", "masks", "distractors"):
            (out / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc}") from exc
    root = np.random.SeedSequence(config.seed)
    index = {
        "config": asdict(config),
        "config_hash": config_hash(asdict(config)),
        "classes": [f"{SHAPES[c]}-{PATTERNS[c]}" for c in range(config.num_classes)],
        "folds": [{"novel": config.novel_classes(f), "base": config.base_classes(f)} for f in range(config.folds)],
        "train": {},
        "test": [],
    }

    def emit(record_id, rng, cls, distractor):
        img, mask, dmask = render_image(cls, rng, config.image_size, distractor, config.noise_sigma)
        write_ppm(out / "images" / f"{record_id}.ppm", img)
        write_pgm(out / "masks" / f"{record_id}.pgm", mask)
        rec = {"id": record_id, "image": f"images/{record_id}.ppm", "mask": f"masks/{record_id}.pgm",
               "class_id": cls, "distractor_class": distractor, "distractor_mask": None}
        if distractor is not None:
            write_pgm(out / "distractors" / f"{record_id}.pgm", dmask)
            rec["distractor_mask"] = f"distractors/{record_id}.pgm"
        return rec

    fold_seeds = root.spawn(config.folds + 1)
    for f in range(config.folds):
        rng = np.random.default_rng(fold_seeds[f])
        novel = config.novel_classes(f)
        records = []
        for cls in config.base_classes(f):
            for n in range(config.train_per_class_per_fold):
                distractor = None
                if rng.random() < config.distractor_probability:
                    distractor = int(novel[rng.integers(len(novel))])
                records.append(emit(f"f{f}_c{cls}_{n:03d}", rng, cls, distractor))
        index["train"][str(f)] = records
    rng = np.random.default_rng(fold_seeds[-1])
    for cls in range(config.num_classes):
        others = [c for c in range(config.num_classes) if c != cls]
        for n in range(config.test_per_class):
            distractor = None
            if rng.random() < config.query_clutter_probability:
                distractor = int(others[rng.integers(len(others))])
            index["test"].append(emit(f"t_c{cls}_{n:03d}", rng, cls, distractor))
    write_json(out / "index.json", index)
    return index


@dataclass
class Record:
    id: str
    image: np.ndarray
    mask: np.ndarray
    class_id: int
    distractor_class: int = None
    distractor_mask: np.ndarray = None


@dataclass
class SyntheticDataset:
    root: Path
    index: dict
    train: dict = field(default_factory=dict)  # fold -> [Record]
    test: list = field(default_factory=list)

    @classmethod
    def load(cls, root):
        root = Path(root)
        index = read_json(root / "index.json")

        def rec(r):
            dm = read_mask(root / r["distractor_mask"]) if r["distractor_mask"] else None
            return Record(r["id"], read_ppm(root / r["image"]), read_mask(root / r["mask"]),
                          r["class_id"], r["distractor_class"], dm)

        ds = cls(root, index)
        ds.train = {int(f): [rec(r) for r in recs] for f, recs in index["train"].items()}
        ds.test = [rec(r) for r in index["test"]]
        return ds

    @property
    def config_hash(self):
        return self.index["config_hash"]

    def novel_classes(self, fold):
        return list(self.index["folds"][fold]["novel"])

    def base_classes(self, fold):
        return list(self.index["folds"][fold]["base"])

    def train_records(self, fold):
        if fold not in self.train:
            raise DataError(f"no training split for fold {fold}")
        return self.train[fold]

    def test_by_class(self, cls):
        return [r for r in self.test if r.class_id == cls]


@dataclass
class Episode:
    class_id: int
    support_images: list
    support_masks: list
    query_image: np.ndarray
    query_gt: np.ndarray
    support_ids: list = field(default_factory=list)
    query_id: str = ""

    @property
    def k_shot(self):
        return len(self.support_images)


def sample_episodes(dataset, fold, k_shot=1, n_episodes=1000, seed=0):
    """Draw a novel class uniformly, then ``k_shot`` supports and one disjoint query."""
    if k_shot < 1:
        raise ConfigError("k_shot must be >= 1")
    rng = np.random.default_rng([seed, fold, k_shot])
    pools = {c: dataset.test_by_class(c) for c in dataset.novel_classes(fold)}
    for c, pool in pools.items():
        if len(pool) < k_shot + 1:
            raise DataError(f"class {c} has {len(pool)} images, need {k_shot + 1}")
    classes = sorted(pools)
    episodes = []
    for _ in range(n_episodes):
        c = classes[int(rng.integers(len(classes)))]
        pick = rng.choice(len(pools[c]), size=k_shot + 1, replace=False)
        sup = [pools[c][i] for i in pick[:-1]]
        q = pools[c][pick[-1]]
        episodes.append(Episode(c, [r.image for r in sup], [r.mask for r in sup], q.image, q.mask,
                                [r.id for r in sup], q.id))
    return episodes


# --- augmentation -------------------------------------------------------------

def hflip(image, *maps):
    return (image[:, ::-1].copy(),) + tuple(m[..., ::-1].copy() for m in maps)


def color_jitter(image, rng, strength=0.2):
    brightness = rng.uniform(-strength, strength)
    contrast = 1.0 + rng.uniform(-strength, strength)
    mean = image.mean(axis=(0, 1), keepdims=True)
    return np.clip((image - mean) * contrast + mean + brightness, 0.0, 1.0).astype(np.float32)


def random_resized_crop(image, label_map, rng, scale=(0.8, 1.0)):
    """Crop a square of side ``s * H`` and resize back (bilinear image, nearest labels)."""
    from .layers import bilinear_resize

    H, W = image.shape[:2]
    s = rng.uniform(*scale)
    ch, cw = max(2, int(round(H * s))), max(2, int(round(W * s)))
    y0 = int(rng.integers(0, H - ch + 1))
    x0 = int(rng.integers(0, W - cw + 1))
    crop = image[y0:y0 + ch, x0:x0 + cw].transpose(2, 0, 1)
    img = bilinear_resize(crop, (H, W)).transpose(1, 2, 0)
    rows = y0 + (np.arange(H) * ch) // H
    cols = x0 + (np.arange(W) * cw) // W
    labels = label_map[..., rows[:, None], cols[None, :]]
    return np.clip(img, 0, 1).astype(np.float32), labels
