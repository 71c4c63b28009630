"""Grad-CAM heatmaps for the segmentation network and their visualisation.

The explained score is the sum of pre-softmax logits of the target class(es)
over the image. Feature maps come from the last 3x3 convolution before the
1x1 head (``model.PENULTIMATE_LAYER``).

Colormap control points (value -> RGB), linearly interpolated::

    0.00 blue   (0, 0, 1)
    0.25 cyan   (0, 1, 1)
    0.50 green  (0, 1, 0)
    0.75 yellow (1, 1, 0)
    1.00 red    (1, 0, 0)

Images are written as binary PPM (P6, maxval 255, no comments).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data.preprocess import IMAGE_SIZE, resize_image
from .model import PENULTIMATE_LAYER, AttentionUNet, forward, predict_mask
from .tensor import ContractError, Tensor

TUMOR_CLASSES = (1, 2, 3)
COLORMAP_POSITIONS = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
COLORMAP_RGB = np.array([
    [0.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [0.0, 1.0, 0.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 0.0],
])
SMOOTHING_CUTOFF = 0.5


@dataclass
class GradCamConfig:
    target: int | str = "tumor"   # class index 0..3, or "tumor" for classes 1+2+3
    masked: bool = False          # restrict the score to pixels predicted as the target
    sigma: float = 2.0
    alpha: float = 0.4
    score_scale: float = 1.0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not self.score_scale > 0:
            raise ValueError("score_scale must be positive")


@dataclass
class Heatmap:
    values: np.ndarray
    normalized: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def target_classes(target, num_classes: int = 4) -> tuple[int, ...]:
    if target == "tumor":
        return TUMOR_CLASSES
    if isinstance(target, (int, np.integer)) and not isinstance(target, bool) and 0 <= target < num_classes:
        return (int(target),)
    raise ContractError(f"invalid Grad-CAM target {target!r}; use 0..{num_classes - 1} or 'tumor'")


def gradcam(model: AttentionUNet, image, config: GradCamConfig | None = None) -> Heatmap:
    """Raw (unnormalised) Grad-CAM map at the feature-map resolution."""
    config = config or GradCamConfig()
    classes = target_classes(config.target, model.config.num_classes)
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.ndim != 4 or x.shape[0] != 1:
        raise ContractError(f"gradcam explains one image at a time, got shape {x.shape}")
    out = forward(model, x, return_intermediates=True)
    logits, features = out["logits"], out["penultimate"]
    selected = logits[:, list(classes)]
    if config.masked:
        predicted = predict_mask(out["probs"])
        keep = np.isin(predicted, classes)[:, None].astype(selected.data.dtype)
        selected = selected * keep
    score = selected.sum() * config.score_scale
    score.backward()
    acts = features.data[0].astype(np.float64)
    grads = features.grad[0].astype(np.float64) if features.grad is not None else np.zeros_like(acts)
    model.zero_grad()
    weights = grads.mean(axis=(1, 2))
    cam = np.tensordot(weights, acts, axes=(0, 0))
    return Heatmap(np.maximum(cam, 0.0), normalized=False)


def normalize_heatmap(h: Heatmap) -> Heatmap:
    peak = h.values.max()
    values = h.values / peak if peak > 0 else h.values.copy()
    return Heatmap(values, normalized=True)


def resize_heatmap(h: Heatmap, size: int = IMAGE_SIZE) -> Heatmap:
    values = np.clip(resize_image(h.values, (size, size)), 0.0, 1.0 if h.normalized else np.inf)
    return Heatmap(values, normalized=h.normalized)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3 * sigma)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-(offsets ** 2) / (2 * sigma * sigma))
    return w / w.sum()


def _smooth_axis(values: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = len(kernel) // 2
    pad = [(0, 0)] * values.ndim
    pad[axis] = (radius, radius)
    # half-sample symmetric extension keeps the mean of the map unchanged
    padded = np.pad(values, pad, mode="symmetric")
    n = values.shape[axis]
    out = np.zeros_like(values)
    for k, w in enumerate(kernel):
        out += w * np.take(padded, np.arange(k, k + n), axis=axis)
    return out


def gaussian_smooth(h: Heatmap, sigma: float) -> Heatmap:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma < SMOOTHING_CUTOFF:
        return Heatmap(h.values.copy(), normalized=h.normalized)
    kernel = gaussian_kernel(sigma)
    values = _smooth_axis(_smooth_axis(np.asarray(h.values, dtype=np.float64), kernel, 0), kernel, 1)
    if h.normalized and values.max() > 0:
        values = values / values.max()
    return Heatmap(values, normalized=h.normalized)


def colormap(values: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to RGB through the fixed 5-point ramp."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.stack([np.interp(v, COLORMAP_POSITIONS, COLORMAP_RGB[:, c]) for c in range(3)], axis=-1)


def _gray_rgb(image: np.ndarray) -> np.ndarray:
    return np.repeat(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)[..., None], 3, axis=-1)


def overlay(image: np.ndarray, h: Heatmap, alpha: float = 0.4) -> np.ndarray:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if np.shape(image) != h.shape:
        raise ContractError(f"image {np.shape(image)} and heatmap {h.shape} differ in size")
    blended = (1.0 - alpha) * _gray_rgb(image) + alpha * colormap(h.values)
    return np.clip(blended, 0.0, 1.0)


# -- image output ------------------------------------------------------------------
def quantize(rgb: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8 with round-half-up."""
    return np.clip(np.floor(np.asarray(rgb, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def _as_rgb8(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 2:
        img = _gray_rgb(img)
    if img.dtype == np.uint8:
        return img
    return quantize(img)


def write_ppm(path, img: np.ndarray) -> None:
    rgb = _as_rgb8(img)
    h, w, _ = rgb.shape
    try:
        Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write image {path}: {exc}") from exc


def read_ppm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not blob[end:end + 1].isspace():
            end += 1
        fields.append(blob[pos:end])
        pos = end
    pos += 1
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos).reshape(h, w, 3)


def render_triptych(original: np.ndarray, heatmap: np.ndarray, overlaid: np.ndarray, path) -> None:
    """Write ``path`` (panels side by side) plus ``original.ppm``, ``heatmap.ppm``
    and ``overlay.ppm`` next to it. Grayscale panels are replicated to RGB."""
    panels = [_as_rgb8(p) for p in (original, heatmap, overlaid)]
    heights = {p.shape[0] for p in panels}
    if len(heights) != 1:
        raise ContractError("triptych panels must share a height")
    path = Path(path)
    for name, panel in zip(("original.ppm", "heatmap.ppm", "overlay.ppm"), panels):
        write_ppm(path.parent / name, panel)
    write_ppm(path, np.concatenate(panels, axis=1))


def write_heatmap_csv(h: Heatmap, path) -> None:
    lines = [",".join(repr(float(v)) for v in row) for row in np.asarray(h.values)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_heatmap_csv(path) -> np.ndarray:
    return np.array([[float(v) for v in line.split(",")] for line in Path(path).read_text().splitlines() if line])


def explain_image(model: AttentionUNet, image: np.ndarray, config: GradCamConfig | None = None,
                  size: int = IMAGE_SIZE):
    """Full pipeline for one ``[C,H,W]`` image.

    Returns ``(display, smoothed heatmap, overlay RGB)`` all at ``size``; the
    display image is channel 0 (FLAIR).
    """
    config = config or GradCamConfig()
    raw = gradcam(model, np.asarray(image)[None], config)
    heat = gaussian_smooth(resize_heatmap(normalize_heatmap(raw), size), config.sigma)
    display = np.clip(resize_image(np.asarray(image)[0], (size, size)), 0.0, 1.0)
    return display, heat, overlay(display, heat, config.alpha)


def write_explanation(model: AttentionUNet, image: np.ndarray, out_dir, config: GradCamConfig | None = None,
                      extra_metadata: dict | None = None, size: int = IMAGE_SIZE) -> dict:
    """Emit the three panels, the triptych, ``heatmap.csv`` and ``metadata.json``."""
    config = config or GradCamConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    display, heat, blended = explain_image(model, image, config, size)
    render_triptych(display, colormap(heat.values), blended, out_dir / "triptych.ppm")
    write_heatmap_csv(heat, out_dir / "heatmap.csv")
    meta = {
        "target_layer": PENULTIMATE_LAYER,
        "target": config.target,
        "classes": list(target_classes(config.target, model.config.num_classes)),
        "masked": config.masked,
        "sigma": config.sigma,
        "alpha": config.alpha,
        "size": size,
        **(extra_metadata or {}),
    }
    (out_dir / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta


def gradcam_config_dict(config: GradCamConfig) -> dict:
    return asdict(config)
