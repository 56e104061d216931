"""Class pools and K-shot N-way episode sampling.

Two pool sources exist: a synthetic stroke-glyph generator and an on-disk
corpus laid out as ``root/<class_name>/<image>.pgm`` (ASCII ``P2`` or binary
``P5`` grayscale).  Pixel values are normalized to ``[0, 1]``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import InvalidConfigError, InvalidEpisodeError, InvalidPoolError

SPLITS = ("meta-train", "meta-val", "meta-test")


@dataclass
class ImageClass:
    name: str
    images: np.ndarray  # [n, 1, H, W]

    def __len__(self):
        return len(self.images)


@dataclass
class ClassPool:
    classes: list[ImageClass]
    split: str | None = None

    def __len__(self):
        return len(self.classes)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.classes]

    @property
    def image_shape(self) -> tuple[int, ...]:
        return self.classes[0].images.shape[1:]


@dataclass
class Episode:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    classes: tuple[str, ...]  # label i <-> classes[i]
    train_ids: tuple[tuple[str, int], ...] = ()
    test_ids: tuple[tuple[str, int], ...] = ()

    @property
    def n_way(self) -> int:
        return len(self.classes)

    @property
    def label_map(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.classes)}


def sample_episode(pool: ClassPool, n_way: int, k_shot: int, k_test: int,
                   rng: np.random.Generator) -> Episode:
    """Draw ``n_way`` distinct classes and ``k_shot + k_test`` distinct instances of each.

    The order in which classes are drawn is the (random) label assignment.
    """
    if n_way < 1 or k_shot < 1 or k_test < 0:
        raise InvalidConfigError(f"bad episode shape n_way={n_way} k_shot={k_shot} k_test={k_test}")
    if len(pool) < n_way:
        raise InvalidPoolError(f"pool has {len(pool)} classes, episode needs {n_way}")
    picked = rng.choice(len(pool), size=n_way, replace=False)
    train_x, train_y, test_x, test_y, train_ids, test_ids = [], [], [], [], [], []
    for label, ci in enumerate(picked):
        cls = pool.classes[ci]
        if len(cls) < k_shot + k_test:
            raise InvalidPoolError(
                f"class {cls.name!r} has {len(cls)} instances, episode needs {k_shot + k_test}")
        idx = rng.choice(len(cls), size=k_shot + k_test, replace=False)
        for j, inst in enumerate(idx):
            if j < k_shot:
                train_x.append(cls.images[inst])
                train_y.append(label)
                train_ids.append((cls.name, int(inst)))
            else:
                test_x.append(cls.images[inst])
                test_y.append(label)
                test_ids.append((cls.name, int(inst)))
    shape = pool.image_shape
    return Episode(
        np.stack(train_x), np.asarray(train_y, dtype=np.int64),
        np.stack(test_x) if test_x else np.zeros((0,) + shape),
        np.asarray(test_y, dtype=np.int64),
        tuple(pool.classes[ci].name for ci in picked), tuple(train_ids), tuple(test_ids))


# ---------------------------------------------------------------- synthetic glyphs

@dataclass
class SyntheticGlyphSpec:
    """Stroke-template glyphs.

    Each class is a fixed set of line segments.  An instance perturbs the
    endpoints (``jitter`` px std), shifts the whole glyph by up to ``shift`` px,
    and adds Gaussian pixel noise.  ``rotate_instances`` additionally rotates
    each instance by a random multiple of 90 degrees.
    """

    size: int = 16
    strokes: int = 3
    instances_per_class: int = 20
    jitter: float = 0.5
    shift: float = 1.0
    stroke_width: float = 0.7
    pixel_noise: float = 0.05
    rotate_instances: bool = False


def _render(segments: np.ndarray, size: int, width: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    pts = np.stack([ys.ravel(), xs.ravel()], axis=1)  # [P, 2]
    a, b = segments[:, 0], segments[:, 1]  # [S, 2]
    ab = b - a
    denom = np.maximum((ab * ab).sum(axis=1), 1e-12)
    t = np.clip(((pts[:, None, :] - a[None]) * ab[None]).sum(axis=2) / denom, 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    d2 = ((pts[:, None, :] - closest) ** 2).sum(axis=2)
    return np.exp(-d2 / (2 * width ** 2)).max(axis=1).reshape(size, size)


def _glyph_class(name: str, spec: SyntheticGlyphSpec, rng: np.random.Generator) -> ImageClass:
    lo, hi = 2.0, spec.size - 3.0
    template = rng.uniform(lo, hi, size=(spec.strokes, 2, 2))
    images = np.empty((spec.instances_per_class, 1, spec.size, spec.size))
    for i in range(spec.instances_per_class):
        segs = template + rng.normal(0.0, spec.jitter, size=template.shape)
        segs = segs + rng.uniform(-spec.shift, spec.shift, size=(1, 1, 2))
        img = _render(segs, spec.size, spec.stroke_width)
        if spec.rotate_instances:
            img = np.rot90(img, k=int(rng.integers(4)))
        img = img + rng.normal(0.0, spec.pixel_noise, size=img.shape)
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return ImageClass(name, images)


def split_sizes(n_classes: int, fractions=(0.64, 0.16, 0.20)) -> tuple[int, int, int]:
    if len(fractions) != 3 or any(f < 0 for f in fractions) or sum(fractions) <= 0:
        raise InvalidConfigError(f"split fractions must be three non-negative values, got {fractions}")
    if n_classes < 3:
        raise InvalidConfigError(f"need at least 3 classes to form three splits, got {n_classes}")
    total = float(sum(fractions))
    val = max(1, int(round(n_classes * fractions[1] / total)))
    test = max(1, int(round(n_classes * fractions[2] / total)))
    train = n_classes - val - test
    if train < 1:
        raise InvalidConfigError(f"fractions {fractions} leave no meta-train classes for n={n_classes}")
    return train, val, test


def make_synthetic_pool(spec: SyntheticGlyphSpec, n_classes: int, split_fractions=(0.64, 0.16, 0.20),
                        seed: int = 0) -> tuple[ClassPool, ClassPool, ClassPool]:
    """Generate classes and partition them into meta-train / meta-val / meta-test pools."""
    sizes = split_sizes(n_classes, split_fractions)
    class_seeds = np.random.SeedSequence(seed).spawn(n_classes)
    classes = [_glyph_class(f"glyph{i:04d}", spec, np.random.default_rng(s))
               for i, s in enumerate(class_seeds)]
    bounds = np.cumsum((0,) + sizes)
    return tuple(ClassPool(classes[bounds[i]:bounds[i + 1]], SPLITS[i]) for i in range(3))


def split_pool(pool: ClassPool, split_fractions=(0.64, 0.16, 0.20),
               seed: int = 0) -> tuple[ClassPool, ClassPool, ClassPool]:
    """Randomly partition a pool's classes into the three meta splits."""
    sizes = split_sizes(len(pool), split_fractions)
    order = np.random.default_rng(seed).permutation(len(pool))
    bounds = np.cumsum((0,) + sizes)
    return tuple(ClassPool([pool.classes[j] for j in sorted(order[bounds[i]:bounds[i + 1]])],
                           SPLITS[i]) for i in range(3))


def pool_manifest(pools) -> dict[str, list[str]]:
    return {pool.split or f"pool{i}": pool.names for i, pool in enumerate(pools)}


def write_manifest(path, pools) -> None:
    Path(path).write_text(json.dumps(pool_manifest(pools), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- on-disk corpus

def _pgm_tokens(blob: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace() and blob[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ValueError("truncated header")
        tokens.append(blob[start:pos])
    return tokens, pos


def read_pgm(path) -> np.ndarray:
    """Read a P2/P5 PGM file as a float array in ``[0, 1]``."""
    path = Path(path)
    try:
        blob = path.read_bytes()
        (magic, w, h, maxval), pos = _pgm_tokens(blob, 4)
        w, h, maxval = int(w), int(h), int(maxval)
        if not 0 < maxval < 65536:
            raise ValueError(f"bad maxval {maxval}")
        if magic == b"P5":
            dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
            data = np.frombuffer(blob, dtype=dtype, count=w * h, offset=pos + 1)
        elif magic == b"P2":
            data = np.array(blob[pos:].split()[:w * h], dtype=np.float64)
            if data.size != w * h:
                raise ValueError("not enough pixel values")
        else:
            raise ValueError(f"unsupported magic {magic!r}")
    except (OSError, ValueError) as exc:
        raise InvalidPoolError(f"{path}: cannot read image ({exc})") from None
    return np.clip(data.astype(np.float64).reshape(h, w) / maxval, 0.0, 1.0)


def write_pgm(path, image: np.ndarray, binary: bool = True) -> None:
    """Write a ``[0, 1]`` image as an 8-bit PGM."""
    pixels = np.clip(np.rint(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    if binary:
        Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes())
    else:
        rows = "\n".join(" ".join(str(v) for v in row) for row in pixels)
        Path(path).write_text(f"P2\n{w} {h}\n255\n{rows}\n")


def _resize_nearest(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape
    rows = (np.arange(size) * h / size).astype(int)
    cols = (np.arange(size) * w / size).astype(int)
    return img[rows][:, cols]


def load_corpus(root, image_size: int = 16) -> ClassPool:
    """Load ``root/<class>/*.pgm``; classes sorted by name, images by file name.

    Images whose size differs from ``image_size`` are nearest-neighbor resized.
    Classes without images are skipped with a warning.
    """
    root = Path(root)
    if not root.is_dir():
        raise InvalidPoolError(f"{root}: corpus root is not a directory")
    classes = []
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(f for f in class_dir.iterdir() if f.suffix.lower() == ".pgm")
        if not files:
            warnings.warn(f"{class_dir}: no .pgm images, class skipped", stacklevel=2)
            continue
        images = []
        for f in files:
            img = read_pgm(f)
            if img.shape != (image_size, image_size):
                img = _resize_nearest(img, image_size)
            images.append(img[None])
        classes.append(ImageClass(class_dir.name, np.stack(images)))
    if not classes:
        raise InvalidPoolError(f"{root}: corpus contains no image classes")
    return ClassPool(classes)


# ---------------------------------------------------------------- task distribution

@dataclass
class TaskDistribution:
    """Episode factory over the three split pools.

    Meta-training episodes use ``train_shots`` examples per class; validation
    and test episodes use ``k_shot``.
    """

    pools: tuple[ClassPool, ClassPool, ClassPool]
    n_way: int = 5
    k_shot: int = 1
    k_test: int = 1
    train_shots: int | None = None

    def __post_init__(self):
        names = [set(p.names) for p in self.pools]
        if names[0] & names[1] or names[0] & names[2] or names[1] & names[2]:
            raise InvalidPoolError("meta splits share class names")

    def pool(self, split: str) -> ClassPool:
        return self.pools[SPLITS.index(split)]

    def sample(self, split: str, rng: np.random.Generator, shots: int | None = None) -> Episode:
        if split not in SPLITS:
            raise InvalidEpisodeError(f"unknown split {split!r}")
        if shots is None:
            shots = (self.train_shots or self.k_shot) if split == "meta-train" else self.k_shot
        return sample_episode(self.pool(split), self.n_way, shots, self.k_test, rng)
