"""RISE saliency: importance maps from scores on randomly masked inputs.

Masks are coarse Bernoulli(p) grids, bilinearly upsampled to slightly more
than image size and cropped at a random sub-cell offset, so mask edges are
smooth and not aligned to a fixed lattice.  The map for class ``c`` is
``sum_i score_c(image * mask_i) * mask_i / (num_masks * p)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class MaskSpec:
    num_masks: int = 1000
    grid_size: int = 7
    keep_probability: float = 0.5
    seed: int = 0
    batch_size: int = 50

    def __post_init__(self):
        if self.num_masks < 1:
            raise ValueError("num_masks must be >= 1")
        if self.grid_size < 1:
            raise ValueError("grid_size must be >= 1")
        # p == 1 is allowed as the identity limit
        if not 0 < self.keep_probability <= 1:
            raise ValueError("keep_probability must be in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class SaliencyMap:
    maps: np.ndarray  # (C, H, W)
    class_names: tuple[str, ...]
    spec: MaskSpec
    scores: np.ndarray  # unmasked class scores, (C,)

    @property
    def normalizer(self) -> float:
        return self.spec.num_masks * self.spec.keep_probability

    def metadata(self) -> dict:
        return {"mask_spec": self.spec.to_dict(), "normalizer": self.normalizer,
                "classes": list(self.class_names), "scores": [float(s) for s in self.scores]}


def generate_masks(spec: MaskSpec, image_size: int | tuple[int, int]) -> np.ndarray:
    """``(num_masks, H, W)`` float32 masks in [0, 1], deterministic under ``spec.seed``."""
    h, w = (image_size, image_size) if isinstance(image_size, int) else image_size
    s = spec.grid_size
    rng = np.random.default_rng(spec.seed)
    cell_h, cell_w = math.ceil(h / s), math.ceil(w / s)
    up_h, up_w = (s + 1) * cell_h, (s + 1) * cell_w
    masks = np.empty((spec.num_masks, h, w), dtype=np.float32)
    chunk = 256
    for start in range(0, spec.num_masks, chunk):
        n = min(chunk, spec.num_masks - start)
        # float64 so an all-ones grid interpolates to exactly 1 after the cast
        grid = (rng.random((n, 1, s, s)) < spec.keep_probability).astype(np.float64)
        up = F.interpolate(torch.from_numpy(grid), size=(up_h, up_w), mode="bilinear",
                           align_corners=False).numpy()[:, 0]
        dx = rng.integers(0, cell_h, size=n)
        dy = rng.integers(0, cell_w, size=n)
        for j in range(n):
            masks[start + j] = up[j, dx[j]:dx[j] + h, dy[j]:dy[j] + w]
    np.clip(masks, 0.0, 1.0, out=masks)
    return masks


def _as_numpy_scores(out) -> np.ndarray:
    if isinstance(out, torch.Tensor):
        out = out.detach().cpu().numpy()
    return np.asarray(out, dtype=np.float64)


def rise_saliency(score_fn: Callable, image: torch.Tensor, spec: MaskSpec, *,
                  mean=None, std=None, class_names=None, masks: np.ndarray | None = None) -> SaliencyMap:
    """Per-class saliency maps for one ``(3, H, W)`` image.

    ``score_fn`` maps a ``(B, 3, H, W)`` batch to ``(B, C)`` scores.  When
    ``mean``/``std`` are given the image is treated as normalized: masking
    happens in raw intensity space (0 means blacked-out tissue) and the
    masked image is renormalized before scoring.
    """
    if image.dim() != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {tuple(image.shape)}")
    _, h, w = image.shape
    if masks is None:
        masks = generate_masks(spec, (h, w))
    if masks.shape != (spec.num_masks, h, w):
        raise ValueError(f"masks have shape {masks.shape}, expected {(spec.num_masks, h, w)}")

    if mean is not None:
        m = torch.as_tensor(mean, dtype=image.dtype).view(3, 1, 1)
        sd = torch.as_tensor(std, dtype=image.dtype).view(3, 1, 1)
        raw = image * sd + m
    else:
        raw = image

    def prepare(x):
        return (x - m) / sd if mean is not None else x

    with torch.no_grad():
        base = _as_numpy_scores(score_fn(prepare(raw).unsqueeze(0)))[0]
    acc = np.zeros((len(base), h * w), dtype=np.float64)
    flat = masks.reshape(spec.num_masks, -1).astype(np.float64)
    for start in range(0, spec.num_masks, spec.batch_size):
        stop = min(start + spec.batch_size, spec.num_masks)
        mt = torch.from_numpy(masks[start:stop]).to(image.dtype).unsqueeze(1)
        batch = prepare(raw.unsqueeze(0) * mt)
        try:
            with torch.no_grad():
                scores = _as_numpy_scores(score_fn(batch))
        except Exception as exc:
            raise RuntimeError(f"scoring failed on mask batch starting at index {start}: {exc}") from exc
        if scores.shape != (stop - start, len(base)) or not np.all(np.isfinite(scores)):
            raise RuntimeError(f"invalid scores for mask batch starting at index {start}")
        acc += scores.T @ flat[start:stop]
    maps = (acc / (spec.num_masks * spec.keep_probability)).reshape(len(base), h, w)
    names = tuple(class_names) if class_names is not None else tuple(str(i) for i in range(len(base)))
    return SaliencyMap(maps, names, spec, base)
