"""Slice windowing, resampling, label handling and dataset splitting."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..tensor import ContractError
from .nifti import Volume, read_nifti

SLICE_START = 22
SLICE_COUNT = 100
IMAGE_SIZE = 128
NUM_CLASSES = 4
DEFAULT_EXCLUSIONS = ("BraTS20_Training_355",)
MODALITIES = ("flair", "t1ce")


class SliceRangeError(ValueError):
    """Requested slice window does not fit the volume."""


@dataclass
class CaseRecord:
    """One subject: modality volumes plus the segmentation.

    Volumes can be supplied in memory or loaded lazily from ``paths``.
    """

    case_id: str
    volumes: dict[str, Volume] = field(default_factory=dict)
    paths: dict[str, Path] = field(default_factory=dict)

    def volume(self, key: str) -> Volume:
        if key not in self.volumes:
            if key not in self.paths:
                raise KeyError(f"case {self.case_id} has no {key} volume")
            self.volumes[key] = read_nifti(self.paths[key])
        return self.volumes[key]


@dataclass
class SliceSample:
    image: np.ndarray  # [C, H, W] in [0, 1]
    mask: np.ndarray   # [4, H, W] one-hot


@dataclass
class DatasetSplit:
    train: list[str]
    validation: list[str]
    test: list[str]
    seed: int
    exclusions: list[str]

    def ids(self, name: str) -> list[str]:
        key = {"train": "train", "val": "validation", "validation": "validation", "test": "test"}.get(name)
        if key is None:
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, key)


def extract_slices(case: CaseRecord, start: int = SLICE_START, count: int = SLICE_COUNT,
                   modalities: Sequence[str] = MODALITIES):
    """Axial slices ``start .. start+count-1`` of each modality and the segmentation.

    Yields ``(images, seg)`` where ``images`` maps modality name to a 2D slice.
    """
    vols = {m: case.volume(m) for m in modalities}
    seg = case.volume("seg")
    z = seg.dims[2]
    for m, v in vols.items():
        if v.dims != seg.dims:
            raise ContractError(f"case {case.case_id}: {m} dims {v.dims} differ from seg dims {seg.dims}")
    if start < 0 or count < 1 or start + count > z:
        raise SliceRangeError(f"case {case.case_id}: window start {start} count {count} exceeds Z={z}")
    return [({m: v.voxels[:, :, k] for m, v in vols.items()}, seg.voxels[:, :, k])
            for k in range(start, start + count)]


def _source_coords(n_in: int, n_out: int) -> np.ndarray:
    scale = n_in / n_out
    return (np.arange(n_out) + 0.5) * scale - 0.5


def resize_image(image: np.ndarray, out_shape: tuple[int, int] = (IMAGE_SIZE, IMAGE_SIZE)) -> np.ndarray:
    """Bilinear resampling at pixel centres with edge clamping."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape == tuple(out_shape):
        return image.copy()
    h, w = image.shape
    if h < 2 or w < 2:
        raise ContractError(f"resize_image needs H, W >= 2, got {image.shape}")
    ys = np.clip(_source_coords(h, out_shape[0]), 0, h - 1)
    xs = np.clip(_source_coords(w, out_shape[1]), 0, w - 1)
    y0 = np.minimum(np.floor(ys).astype(int), h - 2)
    x0 = np.minimum(np.floor(xs).astype(int), w - 2)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x0 + 1] * wx
    bottom = image[y0 + 1][:, x0] * (1 - wx) + image[y0 + 1][:, x0 + 1] * wx
    return top * (1 - wy) + bottom * wy


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    src = _source_coords(n_in, n_out)
    # round half down
    return np.clip(np.ceil(src - 0.5).astype(int), 0, n_in - 1)


def resize_mask(labels: np.ndarray, out_shape: tuple[int, int] = (IMAGE_SIZE, IMAGE_SIZE)) -> np.ndarray:
    """Nearest-neighbour resampling; the label alphabet is preserved."""
    labels = np.asarray(labels)
    if labels.shape == tuple(out_shape):
        return labels.copy()
    rows = _nearest_index(labels.shape[0], out_shape[0])
    cols = _nearest_index(labels.shape[1], out_shape[1])
    return labels[rows][:, cols]


def remap_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    ints = np.rint(labels).astype(np.int64)
    if np.any(ints == 3):
        raise ContractError("segmentation already contains label 3; expected alphabet {0,1,2,4}")
    bad = ~np.isin(ints, (0, 1, 2, 4))
    if bad.any():
        raise ContractError(f"unexpected segmentation labels {sorted(set(ints[bad].tolist()))}")
    return np.where(ints == 4, 3, ints)


def one_hot(labels: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError(f"labels must lie in 0..{num_classes - 1}")
    return (np.arange(num_classes).reshape(-1, *([1] * labels.ndim)) == labels[None]).astype(np.float32)


def normalize(voxels: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; constant input maps to zeros."""
    v = np.asarray(voxels, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def split_dataset(ids: Sequence[str], exclusions: Sequence[str] = DEFAULT_EXCLUSIONS,
                  ratios: Sequence[float] = (0.70, 0.15, 0.15), seed: int = 0) -> DatasetSplit:
    """Seeded shuffle then floor-sized validation/test partitions; remainder goes to train."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ContractError(f"split ratios must be three non-negative values summing to 1, got {ratios}")
    excluded = set(exclusions)
    kept = [i for i in ids if i not in excluded]
    if not kept:
        raise ContractError("no cases left after applying exclusions")
    order = np.random.default_rng(seed).permutation(len(kept))
    shuffled = [kept[k] for k in order]
    n = len(shuffled)
    n_val = int(np.floor(ratios[1] * n + 1e-9))
    n_test = int(np.floor(ratios[2] * n + 1e-9))
    n_train = n - n_val - n_test
    return DatasetSplit(
        train=shuffled[:n_train],
        validation=shuffled[n_train:n_train + n_val],
        test=shuffled[n_train + n_val:],
        seed=seed,
        exclusions=list(exclusions),
    )


def case_samples(case: CaseRecord, start: int = SLICE_START, count: int = SLICE_COUNT,
                 modalities: Sequence[str] = MODALITIES, size: int = IMAGE_SIZE) -> list[SliceSample]:
    """Full per-case pipeline: normalise volumes, window, resize, remap, one-hot."""
    normed = {m: normalize(case.volume(m).voxels) for m in modalities}
    staged = CaseRecord(case.case_id, volumes={**{m: Volume(v) for m, v in normed.items()}, "seg": case.volume("seg")})
    samples = []
    for images, seg in extract_slices(staged, start, count, modalities):
        stack = np.stack([resize_image(images[m], (size, size)) for m in modalities]).astype(np.float32)
        labels = resize_mask(remap_labels(seg), (size, size))
        samples.append(SliceSample(image=np.clip(stack, 0.0, 1.0), mask=one_hot(labels)))
    return samples


def discover_cases(root) -> dict[str, CaseRecord]:
    """Map case id to record for every sub-directory holding flair/t1ce/seg files.

    Accepts both ``<id>/flair.nii`` and ``<id>/<id>_flair.nii`` naming.
    """
    root = Path(root)
    cases: dict[str, CaseRecord] = {}
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        paths = {}
        for key in ("flair", "t1ce", "seg"):
            hits = sorted(d.glob(f"*{key}.nii"))
            if hits:
                paths[key] = hits[0]
        if len(paths) == 3:
            cases[d.name] = CaseRecord(d.name, paths=paths)
    return cases
