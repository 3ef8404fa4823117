"""Procedural grayscale texture dataset and image-folder ingestion.

Pixels live in diffusion space [-1, 1]. Class ids follow sorted class-name
order for both the procedural generator and folder loading, so exporting a
synthetic dataset and re-loading it keeps labels stable.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Tuple

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .fileio import atomic_write_bytes, atomic_write_text


class DatasetError(ValueError):
    pass


GENERATORS: Dict[str, Callable] = {}
LUMA = (0.299, 0.587, 0.114)
CONSTANT_LEVEL = -0.6


def _register(name):
    def deco(fn):
        GENERATORS[name] = fn
        return fn
    return deco


def _grid(n: int) -> Tuple[np.ndarray, np.ndarray]:
    r, c = np.meshgrid(np.arange(n, dtype=np.float64), np.arange(n, dtype=np.float64),
                       indexing="ij")
    return r, c


def h_stripes(n: int, frequency: float, phase: float = 0.0, amplitude: float = 0.8) -> np.ndarray:
    """Row r holds amplitude * sin(2*pi*frequency*r/n + phase)."""
    r, _ = _grid(n)
    return amplitude * np.sin(2 * np.pi * frequency * r / n + phase)


# Each generator takes (n, rng, jitter) and returns an (n, n) float64 image.
# ``u(lo, hi)`` draws around the nominal centre; jitter=0 collapses to the
# centre so degenerate (noise-free) samples are reproducible by formula.
def _jittered(rng: np.random.Generator, jitter: float):
    def u(centre: float, half_width: float) -> float:
        return centre + jitter * half_width * (2.0 * rng.random() - 1.0)
    return u


@_register("h-stripes")
def _gen_h_stripes(n, rng, jitter):
    u = _jittered(rng, jitter)
    return h_stripes(n, u(4.0, 1.0), u(0.0, np.pi), u(0.8, 0.15))


@_register("v-stripes")
def _gen_v_stripes(n, rng, jitter):
    u = _jittered(rng, jitter)
    return h_stripes(n, u(4.0, 1.0), u(0.0, np.pi), u(0.8, 0.15)).T


@_register("checker")
def _gen_checker(n, rng, jitter):
    u = _jittered(rng, jitter)
    r, c = _grid(n)
    f = u(3.0, 0.75)
    wave = np.sin(2 * np.pi * f * (r + 0.5) / n + u(0.0, np.pi)) \
        * np.sin(2 * np.pi * f * (c + 0.5) / n + u(0.0, np.pi))
    return u(0.8, 0.15) * np.tanh(4.0 * wave)


@_register("dots")
def _gen_dots(n, rng, jitter):
    u = _jittered(rng, jitter)
    r, c = _grid(n)
    spacing = n / u(4.0, 0.75)
    radius = spacing * u(0.22, 0.05)
    off_r, off_c = u(spacing / 2, spacing / 2), u(spacing / 2, spacing / 2)
    dr = np.mod(r - off_r + spacing / 2, spacing) - spacing / 2
    dc = np.mod(c - off_c + spacing / 2, spacing) - spacing / 2
    bump = np.exp(-(dr ** 2 + dc ** 2) / (2 * radius ** 2))
    amp = u(0.8, 0.15)
    return amp * (2.0 * bump - 1.0)


@_register("radial-rings")
def _gen_rings(n, rng, jitter):
    u = _jittered(rng, jitter)
    r, c = _grid(n)
    cr, cc = u((n - 1) / 2, n / 8), u((n - 1) / 2, n / 8)
    dist = np.hypot(r - cr, c - cc)
    return u(0.8, 0.15) * np.cos(2 * np.pi * u(3.0, 0.75) * dist / n + u(0.0, np.pi))


@_register("gradient")
def _gen_gradient(n, rng, jitter):
    u = _jittered(rng, jitter)
    r, c = _grid(n)
    theta = u(np.pi / 4, np.pi)
    proj = (c - (n - 1) / 2) * np.cos(theta) + (r - (n - 1) / 2) * np.sin(theta)
    return u(0.8, 0.15) * proj / (np.sqrt(2) * (n - 1) / 2)


@_register("blob-noise")
def _gen_blobs(n, rng, jitter):
    u = _jittered(rng, jitter)
    # Field is drawn whatever the jitter; blobs are the class itself.
    field_ = gaussian_filter(rng.standard_normal((n, n)), sigma=u(2.5, 0.5), mode="wrap")
    field_ /= max(np.abs(field_).max(), 1e-12)
    return u(0.8, 0.15) * field_


@_register("constant")
def _gen_constant(n, rng, jitter):
    u = _jittered(rng, jitter)
    return np.full((n, n), u(CONSTANT_LEVEL, 0.1))


DEFAULT_CLASSES = tuple(sorted(GENERATORS))
# Classes with no content; excluded from generation evaluation.
EMPTY_CLASS_NAMES = ("constant", "empty")


@dataclass
class DatasetSpec:
    num_classes: int = 8
    samples_per_class: int = 200
    image_size: int = 32
    seed: int = 0
    jitter: float = 1.0
    max_noise: float = 0.08
    classes: Tuple[str, ...] = DEFAULT_CLASSES

    def validate(self) -> None:
        if self.samples_per_class < 2:
            raise DatasetError("samples_per_class must be >= 2 for a train/val split")
        if self.image_size < 4:
            raise DatasetError("image_size must be >= 4")
        if not 0.0 <= self.jitter <= 1.0:
            raise DatasetError("jitter must be in [0, 1]")
        if self.max_noise < 0:
            raise DatasetError("max_noise must be >= 0")
        names = list(self.classes)[: self.num_classes]
        if len(names) != self.num_classes or self.num_classes < 1:
            raise DatasetError(
                f"num_classes={self.num_classes} but {len(self.classes)} generators listed")
        unknown = [c for c in names if c not in GENERATORS]
        if unknown:
            raise DatasetError(f"unknown class generators: {unknown}")
        if len(set(names)) != len(names):
            raise DatasetError("duplicate class generators")

    @property
    def class_names(self) -> List[str]:
        return sorted(list(self.classes)[: self.num_classes])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = list(self.classes)
        return d


class LabeledImage(NamedTuple):
    pixels: np.ndarray
    label: int
    split: str


@dataclass
class ImageDataset:
    """Images (N, 1, H, W) float32 in [-1, 1], labels (N,) and split tags."""

    images: np.ndarray
    labels: np.ndarray
    splits: np.ndarray
    class_names: List[str]
    files: Optional[List[str]] = None

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(self.images[i], int(self.labels[i]), str(self.splits[i]))

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_size(self) -> int:
        return int(self.images.shape[-1])

    def subset(self, split: str) -> "ImageDataset":
        mask = self.splits == split
        files = [f for f, m in zip(self.files, mask) if m] if self.files else None
        return ImageDataset(self.images[mask], self.labels[mask], self.splits[mask],
                            list(self.class_names), files)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def empty_class_ids(self) -> List[int]:
        return [i for i, n in enumerate(self.class_names) if n in EMPTY_CLASS_NAMES]


def split_tags(n: int, val_fraction: float = 0.1) -> np.ndarray:
    """First 90% of a class's indices train, the remainder validate (at least one each)."""
    n_val = min(max(1, int(round(n * val_fraction))), n - 1)
    return np.array(["train"] * (n - n_val) + ["val"] * n_val)


def synth_image(spec: DatasetSpec, class_name: str, index: int) -> np.ndarray:
    """One (H, W) float32 image, a pure function of (seed, class, index)."""
    class_key = DEFAULT_CLASSES.index(class_name) if class_name in DEFAULT_CLASSES \
        else sum(class_name.encode())
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, class_key, index]))
    img = GENERATORS[class_name](spec.image_size, rng, spec.jitter)
    noise_level = spec.jitter * spec.max_noise * rng.random()
    if noise_level > 0:
        img = img + noise_level * rng.standard_normal(img.shape)
    return np.clip(img, -1.0, 1.0).astype(np.float32)


def synth_dataset(spec: DatasetSpec) -> ImageDataset:
    spec.validate()
    images, labels, splits = [], [], []
    for label, name in enumerate(spec.class_names):
        for i in range(spec.samples_per_class):
            images.append(synth_image(spec, name, i))
            labels.append(label)
        splits.extend(split_tags(spec.samples_per_class))
    return ImageDataset(
        images=np.stack(images)[:, None],
        labels=np.asarray(labels, dtype=np.int64),
        splits=np.asarray(splits),
        class_names=spec.class_names,
    )


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    """[-1, 1] -> [0, 255] by affine map, rounding half to even."""
    scaled = (np.clip(np.asarray(pixels, dtype=np.float64), -1.0, 1.0) + 1.0) * 127.5
    return np.rint(scaled).astype(np.uint8)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    return (np.asarray(pixels, dtype=np.float64) * 2.0 / 255.0 - 1.0).astype(np.float32)


def write_png(path: Path, pixels: np.ndarray) -> None:
    """Write a (1, H, W) or (H, W) image as 8-bit grayscale PNG."""
    arr = to_uint8(np.asarray(pixels).reshape(np.asarray(pixels).shape[-2:]))
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG", optimize=False)
    atomic_write_bytes(Path(path), buf.getvalue())


def read_png(path: Path) -> np.ndarray:
    """Read any PNG as (H, W) float32 in [-1, 1]; colour is reduced by luma weights."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "P", "1"):
                arr = np.asarray(im.convert("L"), dtype=np.float64)
            else:
                rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
                arr = rgb @ np.asarray(LUMA)
    except Exception as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    return from_uint8(arr)


def export_dataset(ds: ImageDataset, root: Path, spec: Optional[DatasetSpec] = None) -> Path:
    """Write ``<root>/<class>/<class>_<index>.png`` plus ``dataset.json``."""
    root = Path(root)
    if not root.parent.exists():
        raise DatasetError(f"parent directory does not exist: {root.parent}")
    root.mkdir(exist_ok=True)
    counters = [0] * ds.num_classes
    split_lists: Dict[str, List[str]] = {"train": [], "val": []}
    for img, label, split in zip(ds.images, ds.labels, ds.splits):
        name = ds.class_names[label]
        (root / name).mkdir(exist_ok=True)
        rel = f"{name}/{name}_{counters[label]:05d}.png"
        counters[label] += 1
        write_png(root / rel, img)
        split_lists[str(split)].append(rel)
    manifest = {
        "format": "fadiff-dataset",
        "version": 1,
        "class_names": ds.class_names,
        "image_size": ds.image_size,
        "spec": spec.to_dict() if spec else None,
        "seed": spec.seed if spec else None,
        "splits": split_lists,
    }
    atomic_write_text(root / "dataset.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def load_image_folder(path: Path) -> ImageDataset:
    """Load ``<root>/<class-name>/*.png``; ids follow sorted class-name order.

    When ``dataset.json`` is present its split lists are honoured; otherwise
    each class is split 90/10 in sorted filename order.
    """
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"not a directory: {root}")
    class_names = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not class_names:
        raise DatasetError(f"no class folders under {root}")
    split_of: Dict[str, str] = {}
    manifest = root / "dataset.json"
    if manifest.exists():
        for split, files in json.loads(manifest.read_text())["splits"].items():
            split_of.update({f: split for f in files})

    images, labels, splits, files = [], [], [], []
    for label, name in enumerate(class_names):
        pngs = sorted((root / name).glob("*.png"))
        if not pngs:
            raise DatasetError(f"class folder has no PNG files: {root / name}")
        tags = split_tags(len(pngs)) if len(pngs) > 1 else np.array(["train"])
        for png, tag in zip(pngs, tags):
            rel = f"{name}/{png.name}"
            images.append(read_png(png))
            labels.append(label)
            splits.append(split_of.get(rel, tag))
            files.append(rel)
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DatasetError(f"images have mixed sizes: {sorted(shapes)}")
    return ImageDataset(np.stack(images)[:, None], np.asarray(labels, dtype=np.int64),
                        np.asarray(splits), class_names, files)
