"""Synthetic glioma-like phantoms with known ground truth.

Each case has an elliptical "brain" and one ellipsoidal lesion built from
three concentric shells: edema (2) outside, enhancing tumour (4) inside it and
a necrotic core (1) at the centre. FLAIR is bright over the whole lesion and
brightest over edema; T1CE lights up the enhancing shell and is dark in the
core. A single modality therefore cannot separate every class.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..tensor import ContractError
from .nifti import Volume
from .preprocess import CaseRecord

MIN_XY = 32

# (flair, t1ce) noise-free intensities per tissue
INTENSITY = {
    "outside": (0.0, 0.0),
    "brain": (0.35, 0.40),
    "edema": (0.85, 0.35),
    "enhancing": (0.65, 0.95),
    "necrotic": (0.65, 0.15),
}
NOISE_FRACTION = 0.05
ENHANCING_SCALE = 0.62
NECROTIC_SCALE = 0.32


def _ellipsoid(grid, center, radii) -> np.ndarray:
    x, y, z = grid
    return ((x - center[0]) / radii[0]) ** 2 + ((y - center[1]) / radii[1]) ** 2 + ((z - center[2]) / radii[2]) ** 2 <= 1.0


def _one_case(rng: np.random.Generator, dims: tuple[int, int, int], window: tuple[int, int]):
    nx, ny, nz = dims
    grid = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    x, y, _ = grid
    brain = ((x - (nx - 1) / 2) / (0.45 * nx)) ** 2 + ((y - (ny - 1) / 2) / (0.40 * ny)) ** 2 <= 1.0

    start, count = window
    cz = start + count // 2
    r_xy = rng.uniform(0.16, 0.24, size=2) * np.array([nx, ny])
    # keep the lesion inside the brain ellipse
    cx = int(round((nx - 1) / 2 + rng.uniform(-1, 1) * max(0.0, 0.45 * nx - r_xy[0]) * 0.5))
    cy = int(round((ny - 1) / 2 + rng.uniform(-1, 1) * max(0.0, 0.40 * ny - r_xy[1]) * 0.5))
    r_z = max(count / 2 + 1.0, rng.uniform(0.25, 0.4) * nz)
    center = (cx, cy, cz)
    radii = np.array([r_xy[0], r_xy[1], r_z])

    edema = _ellipsoid(grid, center, radii) & brain
    enhancing = _ellipsoid(grid, center, radii * ENHANCING_SCALE) & edema
    necrotic = _ellipsoid(grid, center, radii * NECROTIC_SCALE) & enhancing

    seg = np.zeros(dims, dtype=np.uint8)
    seg[edema] = 2
    seg[enhancing] = 4
    seg[necrotic] = 1

    tissue_masks = [
        (brain, "brain"),
        (edema, "edema"),
        (enhancing, "enhancing"),
        (necrotic, "necrotic"),
    ]
    flair = np.zeros(dims)
    t1ce = np.zeros(dims)
    for mask, name in tissue_masks:
        flair[mask] = INTENSITY[name][0]
        t1ce[mask] = INTENSITY[name][1]
    values = np.array(list(INTENSITY.values()))
    sigma = NOISE_FRACTION * (values.max() - values.min())
    flair = flair + rng.normal(0.0, sigma, size=dims)
    t1ce = t1ce + rng.normal(0.0, sigma, size=dims)
    return flair.astype(np.float32), t1ce.astype(np.float32), seg


def generate_phantom(seed: int, n_cases: int, dims: Sequence[int] = (64, 64, 8),
                     window: tuple[int, int] = (2, 4), prefix: str = "Phantom") -> list[CaseRecord]:
    """In-memory phantom cases, deterministic in ``seed``."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or dims[0] < MIN_XY or dims[1] < MIN_XY:
        raise ContractError(f"phantom dims must be (X, Y, Z) with X, Y >= {MIN_XY}, got {dims}")
    start, count = window
    if start < 0 or count < 1 or start + count > dims[2]:
        raise ContractError(f"slice window {window} does not fit Z={dims[2]}")
    if n_cases < 1:
        raise ContractError("n_cases must be >= 1")
    rng = np.random.default_rng(seed)
    cases = []
    for k in range(n_cases):
        flair, t1ce, seg = _one_case(rng, dims, window)
        labels_in_window = set(np.unique(seg[:, :, start:start + count]).tolist())
        if labels_in_window != {0, 1, 2, 4}:
            raise AssertionError(f"phantom case {k} lacks classes in its window: {labels_in_window}")
        cases.append(CaseRecord(
            f"{prefix}_{k:03d}",
            volumes={"flair": Volume(flair, 16), "t1ce": Volume(t1ce, 16), "seg": Volume(seg, 2)},
        ))
    return cases
