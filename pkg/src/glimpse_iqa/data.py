"""Dataset ingestion (TID2008 layout), synthetic distortions and splits."""
from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .imgproc import local_contrast_normalize, to_grayscale

TID2008_TYPES = (
    "additive gaussian noise",
    "additive noise in color components",
    "spatially correlated noise",
    "masked noise",
    "high frequency noise",
    "impulse noise",
    "quantization noise",
    "gaussian blur",
    "image denoising",
    "jpeg compression",
    "jpeg2000 compression",
    "jpeg transmission errors",
    "jpeg2000 transmission errors",
    "non eccentricity pattern noise",
    "local block-wise distortions of different intensity",
    "mean shift",
    "contrast change",
)
TID2008_EXCLUDED_TYPES = (16, 17)
TID2008_EXCLUDED_REFS = (25,)
MOS_FILENAMES = ("mos_with_names.txt", "mos.txt")

SYNTH_KINDS = ("additive_gaussian", "high_frequency_noise", "local_blockwise", "gaussian_blur")
_KIND_MOS_OFFSET = {"additive_gaussian": 0.0, "high_frequency_noise": 0.15,
                    "local_blockwise": 0.3, "gaussian_blur": 0.45}
_NOISE_SIGMA = (0.02, 0.04, 0.07, 0.12)
_HF_SIGMA = (0.03, 0.06, 0.10, 0.16)
_BLUR_SIGMA = (1.0, 1.8, 2.8, 4.0)
_TID_NAME = re.compile(r"^[iI](\d+)_(\d+)_(\d+)\.(bmp|png)$", re.IGNORECASE)


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    mos: float
    distortion_type: int
    level: int
    reference_id: int
    path: str | None = None
    image: np.ndarray | None = field(default=None, repr=False)
    blocks: tuple | None = field(default=None, repr=False)  # (row, col, size) of corrupted squares

    def load(self) -> np.ndarray:
        """Grayscale float image in [0, 1]."""
        if self.image is not None:
            return self.image
        if self.path is None:
            raise DatasetError("sample has neither an image nor a path")
        return read_image(self.path)


@dataclass
class DatasetIndex:
    samples: list[Sample]
    class_names: list[str]
    references: dict[int, str]

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


def read_image(path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    return to_grayscale(arr)


def write_gray_png(path, img: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


# --------------------------------------------------------------------------
# TID2008


def load_tid2008(root_dir) -> DatasetIndex:
    """Index a TID2008-style tree: a MOS listing of ``score filename`` lines
    plus the distorted images (in ``distorted_images/`` or the root).

    The 25th reference and the mean-shift / contrast-change types are
    dropped; the remaining 15 types become classes 0..14.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    mos_file = next((root / n for n in MOS_FILENAMES if (root / n).is_file()), None)
    if mos_file is None:
        raise DatasetError(f"no MOS listing ({' or '.join(MOS_FILENAMES)}) in {root}")
    image_dir = root / "distorted_images" if (root / "distorted_images").is_dir() else root
    kept = [t for t in range(1, len(TID2008_TYPES) + 1) if t not in TID2008_EXCLUDED_TYPES]
    class_of = {t: i for i, t in enumerate(kept)}

    samples = []
    refs: dict[int, str] = {}
    for lineno, line in enumerate(mos_file.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DatasetError(f"{mos_file}:{lineno}: expected 'score filename', got {line!r}")
        try:
            mos = float(parts[0])
        except ValueError:
            raise DatasetError(f"{mos_file}:{lineno}: bad score {parts[0]!r}") from None
        m = _TID_NAME.match(parts[1])
        if m is None or not math.isfinite(mos):
            raise DatasetError(f"{mos_file}:{lineno}: unrecognised entry {line!r}")
        ref, dtype, level = (int(g) for g in m.groups()[:3])
        if ref in TID2008_EXCLUDED_REFS or dtype in TID2008_EXCLUDED_TYPES:
            continue
        if dtype not in class_of:
            raise DatasetError(f"{mos_file}:{lineno}: unknown distortion type {dtype}")
        path = _find_case_insensitive(image_dir, parts[1])
        if path is None:
            raise DatasetError(f"{mos_file}:{lineno}: image {parts[1]} not found in {image_dir}")
        refs[ref] = f"I{ref:02d}"
        samples.append(Sample(mos, class_of[dtype], level, ref, path=str(path)))
    if not samples:
        raise DatasetError(f"{mos_file}: no usable samples")
    samples.sort(key=lambda s: (s.reference_id, s.distortion_type, s.level))
    return DatasetIndex(samples, [TID2008_TYPES[t - 1] for t in kept], dict(sorted(refs.items())))


def _find_case_insensitive(directory: Path, name: str) -> Path | None:
    direct = directory / name
    if direct.is_file():
        return direct
    lower = name.lower()
    for p in directory.iterdir():
        if p.name.lower() == lower:
            return p
    return None


def export_index_csv(index: DatasetIndex, path) -> None:
    """Write ``path,mos,type,level,reference_id`` rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "mos", "type", "level", "reference_id"])
        for s in index.samples:
            w.writerow([s.path or "", repr(float(s.mos)), s.distortion_type, s.level, s.reference_id])


def load_index_csv(path, class_names: Sequence[str] | None = None) -> DatasetIndex:
    """Read an index written by :func:`export_index_csv`; relative image
    paths resolve against the CSV's directory."""
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"index file {path} does not exist")
    base = path.parent
    samples = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["path", "mos", "type", "level", "reference_id"]:
            raise DatasetError(f"{path}: unexpected header {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            try:
                img_path = Path(row["path"])
                if not img_path.is_absolute():
                    img_path = base / img_path
                samples.append(Sample(float(row["mos"]), int(row["type"]), int(row["level"]),
                                      int(row["reference_id"]), path=str(img_path)))
            except (TypeError, ValueError) as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
    if not samples:
        raise DatasetError(f"{path}: no samples")
    k = max(s.distortion_type for s in samples) + 1
    names = list(class_names) if class_names else [
        SYNTH_KINDS[i] if i < len(SYNTH_KINDS) else f"type{i}" for i in range(k)]
    refs = {s.reference_id: f"ref{s.reference_id:03d}" for s in samples}
    samples.sort(key=lambda s: (s.reference_id, s.distortion_type, s.level))
    return DatasetIndex(samples, names, dict(sorted(refs.items())))


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class DistortionSpec:
    kind: str
    level: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SYNTH_KINDS:
            raise ValueError(f"unknown distortion kind {self.kind!r}")
        if not 0 <= self.level <= 4:
            raise ValueError(f"level must be in 0..4, got {self.level}")


def synthetic_reference(seed: int, size: int = 160) -> np.ndarray:
    """Procedural texture: gradient, grating or checkerboard, smooth blobs,
    plus a fine-grained texture layer so every region carries detail."""
    rng = np.random.default_rng([7919, seed])
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    angle = rng.uniform(0, 2 * np.pi)
    img = 0.25 * (np.cos(angle) * xx + np.sin(angle) * yy)
    period = rng.uniform(10, 28)
    if rng.random() < 0.5:
        theta = rng.uniform(0, np.pi)
        img += 0.10 * np.sin(2 * np.pi * (np.cos(theta) * xx + np.sin(theta) * yy) * size / period)
    else:
        img += 0.10 * np.sign(np.sin(np.pi * xx * size / period) * np.sin(np.pi * yy * size / period))
    smooth = ndimage.gaussian_filter(rng.standard_normal((size, size)), rng.uniform(3.0, 6.0))
    img += 0.10 * smooth / (smooth.std() + 1e-12)
    for _ in range(rng.integers(2, 5)):
        cy, cx, r = rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.05, 0.18)
        img += rng.uniform(-0.2, 0.2) * (((yy - cy) ** 2 + (xx - cx) ** 2) < r * r)
    fine = ndimage.gaussian_filter(rng.standard_normal((size, size)), 0.8)
    img += rng.uniform(0.03, 0.05) * fine / (fine.std() + 1e-12)
    img = img - img.mean() + 0.5
    return _quantize(np.clip(img, 0.05, 0.95))


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def synthetic_mos(kind: str, level: int) -> float:
    return 9.0 - 2.0 * max(level - 1, 0) - _KIND_MOS_OFFSET[kind]


def block_layout(shape: tuple[int, int], count: int, rng: np.random.Generator,
                 block: int) -> list[tuple[int, int, int]]:
    """Non-overlapping square blocks; earlier blocks do not depend on ``count``."""
    h, w = shape
    placed: list[tuple[int, int, int]] = []
    for _ in range(count):
        for _attempt in range(1000):
            r = int(rng.integers(0, h - block + 1))
            c = int(rng.integers(0, w - block + 1))
            if all(abs(r - r2) >= block or abs(c - c2) >= block for r2, c2, _ in placed):
                break
        placed.append((r, c, block))
    return placed


def synth_distort(reference: np.ndarray, spec: DistortionSpec, *, min_size: int = 32,
                  block: int | None = None) -> tuple[np.ndarray, float, int, list]:
    """Apply one synthetic distortion.

    Returns ``(image, mos, class_index, blocks)``; ``blocks`` lists the
    corrupted ``(row, col, size)`` squares for ``local_blockwise`` and is
    empty otherwise. Level 0 returns the reference unchanged. The random
    field depends on ``spec.seed`` only, so levels of one seed are nested.
    """
    ref = np.asarray(reference, dtype=np.float64)
    if ref.ndim != 2 or min(ref.shape) < min_size:
        raise DatasetError(f"reference {ref.shape} smaller than required {min_size}x{min_size}")
    cls = SYNTH_KINDS.index(spec.kind)
    mos = synthetic_mos(spec.kind, spec.level)
    if spec.level == 0:
        return ref.copy(), mos, cls, []
    i = spec.level - 1
    rng = np.random.default_rng([104729, spec.seed, cls])
    blocks: list = []
    if spec.kind == "additive_gaussian":
        out = ref + _NOISE_SIGMA[i] * rng.standard_normal(ref.shape)
    elif spec.kind == "high_frequency_noise":
        # smooth noise shifted to the Nyquist corner of the spectrum
        rows, cols = np.indices(ref.shape)
        hf = ndimage.gaussian_filter(rng.standard_normal(ref.shape), 1.0) * (1 - 2 * ((rows + cols) % 2))
        out = ref + _HF_SIGMA[i] * hf / hf.std()
    elif spec.kind == "gaussian_blur":
        out = ndimage.gaussian_filter(ref, _BLUR_SIGMA[i], mode="nearest")
    else:
        size = block or max(8, min(ref.shape) // 5)
        layout = block_layout(ref.shape, 4, rng, size)
        shifts = rng.uniform(0.2, 0.35, size=4) * rng.choice([-1.0, 1.0], size=4)
        out = ref.copy()
        for (r, c, s), shift in list(zip(layout, shifts))[: spec.level]:
            patch = out[r:r + s, c:c + s]
            value = patch.mean() + shift
            if not 0.0 < value < 1.0:
                value = patch.mean() - shift
            out[r:r + s, c:c + s] = value
            blocks.append((r, c, s))
    return _quantize(out), mos, cls, blocks


def make_synthetic_dataset(n_refs: int = 20, size: int = 160, kinds: Sequence[str] = SYNTH_KINDS,
                           levels: Sequence[int] = (1, 2, 3, 4), seed: int = 0,
                           ref_offset: int = 0) -> DatasetIndex:
    """In-memory dataset of every (reference, kind, level) combination."""
    samples = []
    refs = {}
    for r in range(ref_offset, ref_offset + n_refs):
        ref_img = synthetic_reference(seed * 100003 + r, size)
        refs[r] = f"ref{r:03d}"
        for kind in kinds:
            for level in levels:
                img, mos, cls, blocks = synth_distort(ref_img, DistortionSpec(kind, level, seed * 100003 + r))
                samples.append(Sample(mos, cls, level, r, image=img, blocks=tuple(blocks)))
    samples.sort(key=lambda s: (s.reference_id, s.distortion_type, s.level))
    return DatasetIndex(samples, list(SYNTH_KINDS), refs)


def write_dataset(index: DatasetIndex, out_dir) -> Path:
    """Write images as 8-bit PNGs plus ``index.csv``; returns the CSV path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for s in index.samples:
        name = f"images/r{s.reference_id:03d}_t{s.distortion_type:02d}_l{s.level}.png"
        write_gray_png(out / name, s.load())
        s.path = name
    csv_path = out / "index.csv"
    export_index_csv(index, csv_path)
    return csv_path


# --------------------------------------------------------------------------
# splits and arrays


def split_by_reference(index, ratios: Sequence[float] = (0.6, 0.2, 0.2), seed: int = 0):
    """Partition samples by reference id into train/val/test lists.

    Counts are ``floor(r0 * N)``, ``floor(r1 * N)`` and the remainder.
    """
    samples = index.samples if isinstance(index, DatasetIndex) else list(index)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three nonnegative values summing to 1, got {ratios}")
    refs = sorted({s.reference_id for s in samples})
    n = len(refs)
    n_train = math.floor(ratios[0] * n + 1e-9)
    n_val = math.floor(ratios[1] * n + 1e-9)
    if n < 3 or n_train == 0 or n_val == 0 or n - n_train - n_val == 0:
        raise DatasetError(f"{n} references cannot fill three splits with ratios {tuple(ratios)}")
    order = np.random.default_rng(seed).permutation(n)
    groups = [set(), set(), set()]
    for rank, j in enumerate(order):
        groups[0 if rank < n_train else 1 if rank < n_train + n_val else 2].add(refs[j])
    return tuple([s for s in samples if s.reference_id in g] for g in groups)


@dataclass
class ArraySplit:
    """Preprocessed images and labels ready for batched episodes."""

    images: np.ndarray  # (N, H, W), contrast-normalised
    mos: np.ndarray
    labels: np.ndarray
    levels: np.ndarray
    references: np.ndarray
    samples: list[Sample] = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "ArraySplit":
        idx = np.asarray(idx, dtype=np.int64)
        return ArraySplit(self.images[idx], self.mos[idx], self.labels[idx], self.levels[idx],
                          self.references[idx], [self.samples[i] for i in idx] if self.samples else [])


def to_arrays(samples: Sequence[Sample], window: int = 7, eps: float = 1e-4) -> ArraySplit:
    if not samples:
        raise DatasetError("empty sample list")
    imgs = [local_contrast_normalize(s.load(), window, eps) for s in samples]
    shapes = {im.shape for im in imgs}
    if len(shapes) != 1:
        raise DatasetError(f"all images in a split must share one size, found {sorted(shapes)}")
    return ArraySplit(
        images=np.stack(imgs),
        mos=np.array([s.mos for s in samples], dtype=np.float64),
        labels=np.array([s.distortion_type for s in samples], dtype=np.int64),
        levels=np.array([s.level for s in samples], dtype=np.int64),
        references=np.array([s.reference_id for s in samples], dtype=np.int64),
        samples=list(samples),
    )
