"""Two-domain image corpora: directory loading, toy generation, augmentation.

Ground-truth labels ride along on every sample for evaluation, but training
code must never look at them. Training entry points run inside
:func:`label_guard`, which turns any read of ``ImageSample.true_label`` into
a :class:`LabelAccessError`.
"""

from __future__ import annotations

import contextlib
import contextvars
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, ImageDraw, UnidentifiedImageError

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}

_labels_locked = contextvars.ContextVar("tpsnet_labels_locked", default=False)


class LabelAccessError(RuntimeError):
    """Raised when training code reads a ground-truth label."""


class DatasetError(ValueError):
    pass


@contextlib.contextmanager
def label_guard():
    token = _labels_locked.set(True)
    try:
        yield
    finally:
        _labels_locked.reset(token)


def labels_locked() -> bool:
    return _labels_locked.get()


@dataclass(frozen=True, eq=False)
class ImageSample:
    pixels: np.ndarray
    domain_id: int
    sample_id: str
    _true_label: int | None = field(default=None, repr=False)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise DatasetError(f"{self.sample_id}: expected HxWx3 pixels, got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise DatasetError(f"{self.sample_id}: pixel values must lie in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def true_label(self) -> int | None:
        if _labels_locked.get():
            raise LabelAccessError(
                f"ground-truth label of {self.sample_id} read inside a training code path"
            )
        return self._true_label

    def with_pixels(self, pixels: np.ndarray) -> "ImageSample":
        return ImageSample(pixels, self.domain_id, self.sample_id, self._true_label)


@dataclass(frozen=True, eq=False)
class DomainDataset:
    samples: tuple[ImageSample, ...]
    domain_id: int
    num_categories: int
    category_names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        for s in self.samples:
            if s.domain_id != self.domain_id:
                raise DatasetError(
                    f"sample {s.sample_id} has domain {s.domain_id}, dataset is {self.domain_id}"
                )

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[ImageSample]:
        return iter(self.samples)

    def __getitem__(self, i: int) -> ImageSample:
        return self.samples[i]

    @property
    def image_shape(self) -> tuple[int, ...]:
        return self.samples[0].pixels.shape

    def pixel_array(self) -> np.ndarray:
        """All pixels stacked as an N x H x W x 3 float64 array."""
        return np.stack([s.pixels for s in self.samples])

    def labels(self) -> np.ndarray:
        """Ground-truth labels; evaluation only."""
        out = [s.true_label for s in self.samples]
        if any(v is None for v in out):
            raise DatasetError(f"domain {self.domain_id} has samples without ground-truth labels")
        return np.asarray(out, dtype=np.int64)

    def has_labels(self) -> bool:
        return all(s._true_label is not None for s in self.samples)

    def subset(self, indices: Sequence[int]) -> "DomainDataset":
        return DomainDataset(
            tuple(self.samples[i] for i in indices),
            self.domain_id,
            self.num_categories,
            self.category_names,
        )


def _read_image(path: Path, image_size: int | None) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if image_size is not None and im.size != (image_size, image_size):
                im = im.resize((image_size, image_size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from exc
    return arr


def read_image(path: str | Path, image_size: int | None = None) -> np.ndarray:
    """One image file as H x W x 3 floats in [0, 1]."""
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"image not found: {p}")
    return _read_image(p, image_size)


def load_domain_directory(
    root_path: str | Path, domain_id: int, image_size: int | None = None
) -> DomainDataset:
    """Load ``root/<category>/<image>`` into a dataset.

    Categories are indexed in lexicographic folder order and samples are
    sorted by (category, file name). Empty category folders are skipped with
    a warning and do not count toward ``num_categories``.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root does not exist: {root}")
    cat_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not cat_dirs:
        raise DatasetError(f"no category directories under {root}")

    samples = []
    names = []
    for cat_dir in cat_dirs:
        files = sorted(
            p for p in cat_dir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
        )
        if not files:
            warnings.warn(f"skipping empty category folder {cat_dir}", stacklevel=2)
            continue
        label = len(names)
        names.append(cat_dir.name)
        for f in files:
            samples.append(
                ImageSample(
                    _read_image(f, image_size),
                    domain_id,
                    f"{cat_dir.name}/{f.name}",
                    label,
                )
            )
    if not samples:
        raise DatasetError(f"no images found under {root}")
    shapes = {s.pixels.shape for s in samples}
    if len(shapes) != 1:
        raise DatasetError(f"images under {root} have mixed sizes {sorted(shapes)}; set image_size")
    return DomainDataset(tuple(samples), domain_id, len(names), tuple(names))


def split_holdout(dataset: DomainDataset, fraction: float, seed: int) -> tuple[DomainDataset, DomainDataset]:
    """Seeded label-free split into (train, holdout); holdout gets ``floor(fraction * n)`` samples."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"holdout fraction must lie in (0, 1), got {fraction}")
    n = len(dataset)
    n_hold = int(fraction * n)
    if n_hold == 0 or n_hold == n:
        raise DatasetError(f"holdout fraction {fraction} leaves an empty split of {n} samples")
    perm = np.random.default_rng([seed, 33, dataset.domain_id]).permutation(n)
    hold = np.sort(perm[:n_hold])
    train = np.sort(perm[n_hold:])
    return dataset.subset(train), dataset.subset(hold)

def write_domain_directory(dataset: DomainDataset, root_path: str | Path) -> None:
    """Write a dataset as 8-bit PNGs in the ``root/<category>/<file>`` layout."""
    root = Path(root_path)
    names = dataset.category_names or tuple(
        f"class_{c:02d}" for c in range(dataset.num_categories)
    )
    for s in dataset:
        label = s._true_label
        cat = names[label] if label is not None else "unlabeled"
        out = root / cat
        out.mkdir(parents=True, exist_ok=True)
        stem = s.sample_id.rsplit("/", 1)[-1]
        stem = stem.rsplit(".", 1)[0]
        Image.fromarray(np.round(s.pixels * 255).astype(np.uint8)).save(out / f"{stem}.png")


# ---------------------------------------------------------------------------
# toy domain pair
# ---------------------------------------------------------------------------

_SUPERSAMPLE = 4


def _class_polygon(category: int, seed: int) -> np.ndarray:
    """Random polygon, mirror-symmetric about the vertical axis so flips keep the class."""
    rng = np.random.default_rng([seed, category, 7])
    n_half = int(rng.integers(2, 5))
    ang = np.sort(rng.uniform(-0.45 * np.pi, 0.45 * np.pi, n_half))
    rad = rng.uniform(0.4, 1.0, n_half)
    right = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
    top = [[0.0, -rng.uniform(0.4, 1.0)]]
    bottom = [[0.0, rng.uniform(0.4, 1.0)]]
    left = right[::-1] * [-1.0, 1.0]
    return np.concatenate([top, right, bottom, left])


def _render(poly: np.ndarray, size: int, rng: np.random.Generator, domain: int) -> np.ndarray:
    big = size * _SUPERSAMPLE
    scale = rng.uniform(0.9, 1.1) * 0.38 * big
    rot = rng.uniform(-0.15, 0.15)
    rmat = np.array([[np.cos(rot), -np.sin(rot)], [np.sin(rot), np.cos(rot)]])
    shift = rng.uniform(-1.5, 1.5, 2) * _SUPERSAMPLE
    pts = [tuple(p) for p in (poly @ rmat.T) * scale + big / 2 + shift]
    if domain == 0:
        bg = tuple(int(v) for v in rng.uniform(0.0, 0.35, 3) * 255)
        fg = tuple(int(v) for v in rng.uniform(0.5, 1.0, 3) * 255)
        im = Image.new("RGB", (big, big), bg)
        ImageDraw.Draw(im).polygon(pts, fill=fg)
    else:
        g = int(rng.uniform(0.7, 1.0) * 255)
        im = Image.new("RGB", (big, big), (0, 0, 0))
        ImageDraw.Draw(im).polygon(pts, outline=(g, g, g), width=int(1.5 * _SUPERSAMPLE))
    x = np.asarray(im.resize((size, size), Image.BOX), dtype=np.float64) / 255.0
    if domain == 0:
        x = np.clip(x + rng.normal(0.0, 0.03, x.shape), 0.0, 1.0)
    return x


def generate_toy_domain_pair(
    num_classes: int, per_class: int, image_size: int, seed: int
) -> tuple[DomainDataset, DomainDataset]:
    """Render a synthetic two-domain corpus.

    Each category is a seeded random polygon. Domain 0 draws it filled in a
    random color over a dark tinted background; domain 1 draws only its
    outline as a gray edge sketch on black. Pose jitter (scale, rotation,
    sub-pixel shift) varies per sample.
    """
    if num_classes < 2 or per_class < 2 or image_size < 16:
        raise ValueError("need num_classes >= 2, per_class >= 2, image_size >= 16")
    names = tuple(f"class_{c:02d}" for c in range(num_classes))
    polys = [_class_polygon(c, seed) for c in range(num_classes)]
    out = []
    for domain in (0, 1):
        rng = np.random.default_rng([seed, domain])
        samples = []
        for c, poly in enumerate(polys):
            for i in range(per_class):
                samples.append(
                    ImageSample(_render(poly, image_size, rng, domain), domain, f"{names[c]}/{i:04d}", c)
                )
        out.append(DomainDataset(tuple(samples), domain, num_classes, names))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# augmentation and grayscale
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentParams:
    flip_p: float = 0.5
    pad: int = 4
    erase_p: float = 0.5
    erase_area: tuple[float, float] = (0.02, 0.2)
    erase_aspect: tuple[float, float] = (0.3, 3.3)


def augment_array(
    pixels: np.ndarray, rng: np.random.Generator, params: AugmentParams = AugmentParams()
) -> np.ndarray:
    """Flip, pad-and-crop, then random-erase one H x W x C image."""
    x = np.asarray(pixels, dtype=np.float64)
    h, w = x.shape[:2]
    if rng.random() < params.flip_p:
        x = x[:, ::-1]
    if params.pad > 0:
        p = params.pad
        padded = np.zeros((h + 2 * p, w + 2 * p) + x.shape[2:], dtype=np.float64)
        padded[p : p + h, p : p + w] = x
        top = int(rng.integers(0, 2 * p + 1))
        left = int(rng.integers(0, 2 * p + 1))
        x = padded[top : top + h, left : left + w]
    x = np.array(x)
    if rng.random() < params.erase_p:
        area = h * w
        for _ in range(10):
            target = rng.uniform(*params.erase_area) * area
            log_r = rng.uniform(np.log(params.erase_aspect[0]), np.log(params.erase_aspect[1]))
            aspect = np.exp(log_r)
            eh = int(round(np.sqrt(target * aspect)))
            ew = int(round(np.sqrt(target / aspect)))
            if 0 < eh < h and 0 < ew < w:
                i = int(rng.integers(0, h - eh + 1))
                j = int(rng.integers(0, w - ew + 1))
                x[i : i + eh, j : j + ew] = rng.random((eh, ew) + x.shape[2:])
                break
    return x


def augment(
    sample: ImageSample, rng_state: np.random.Generator, params: AugmentParams = AugmentParams()
) -> ImageSample:
    return sample.with_pixels(augment_array(sample.pixels, rng_state, params))


def to_grayscale(sample: ImageSample | np.ndarray) -> np.ndarray:
    """Luma conversion; accepts a sample or any ``... x 3`` pixel array."""
    px = sample.pixels if isinstance(sample, ImageSample) else np.asarray(sample, dtype=np.float64)
    return np.clip(px @ LUMA_WEIGHTS, 0.0, 1.0)
