"""Instance-aware data augmentation of support samples.

A support sample is routed by its foreground ratio ``mu``:

* ``mu < pi_l``  -> crop around the largest object and letterbox back to size
* ``mu > pi_h``  -> downsize by ``downsize_factor`` and pad with gray
* otherwise      -> left alone
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .core import bilinear_matrix
from .synthia import Sample

CROP, DOWNSIZE, NONE = "Crop", "Downsize", "None"
_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


@dataclass(frozen=True)
class IdaConfig:
    pi_l: float = 0.15
    pi_h: float = 0.3
    downsize_factor: float = 0.7
    pad_value: float = 0.5

    def __post_init__(self):
        if not 0 <= self.pi_l < self.pi_h <= 1:
            raise ValueError("need 0 <= pi_l < pi_h <= 1")
        if not 0 < self.downsize_factor < 1:
            raise ValueError("downsize factor must lie in (0, 1)")


@dataclass
class AugmentationDecision:
    mu: float
    branch: str
    bbox: tuple | None = None
    window: tuple | None = None


def _check_binary(mask: np.ndarray) -> None:
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be binary")


def foreground_ratio(mask: np.ndarray) -> float:
    mask = np.asarray(mask)
    _check_binary(mask)
    return float(mask.sum() / mask.size)


def route(mu: float, cfg: IdaConfig = IdaConfig()) -> str:
    if mu < cfg.pi_l:
        return CROP
    if mu > cfg.pi_h:
        return DOWNSIZE
    return NONE


def largest_component_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    """``(x0, y0, x1, y1)`` inclusive bbox of the largest 4-connected component.

    Ties go to the component whose first pixel comes earliest in raster order.
    """
    mask = np.asarray(mask)
    _check_binary(mask)
    labels, n = ndimage.label(mask, structure=_FOUR_CONNECTED)
    if n == 0:
        raise ValueError("mask has no foreground")
    # labels are assigned in raster order of first pixel, so argmax picks the tie winner
    sizes = np.bincount(labels.ravel())[1:]
    best = int(np.argmax(sizes)) + 1
    ys, xs = np.nonzero(labels == best)
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def crop_window(bbox, W: int, H: int) -> tuple[int, int, int, int]:
    """Window ``(x0/2, y0/2, (x1+W)/2, (y1+H)/2)``, floor on mins and ceil on maxes.

    The max coordinates are exclusive bounds, clipped to the image.
    """
    x0, y0, x1, y1 = bbox
    return (math.floor(x0 / 2), math.floor(y0 / 2),
            min(W, math.ceil((x1 + W) / 2)), min(H, math.ceil((y1 + H) / 2)))


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = arr.shape[-2:]
    if (h, w) == (out_h, out_w):
        return arr.copy()
    ah = bilinear_matrix(h, out_h)
    aw = bilinear_matrix(w, out_w)
    return (ah @ arr.astype(np.float64) @ aw.T).astype(arr.dtype)


def resize_nearest(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = arr.shape[-2:]
    ri = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    ci = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return arr[..., ri[:, None], ci[None, :]]


def _paste_center(canvas: np.ndarray, patch: np.ndarray) -> np.ndarray:
    H, W = canvas.shape[-2:]
    h, w = patch.shape[-2:]
    top, left = (H - h) // 2, (W - w) // 2
    canvas[..., top:top + h, left:left + w] = patch
    return canvas


def instance_crop(image: np.ndarray, mask: np.ndarray, bbox, W: int, H: int,
                  pad_value: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    wx0, wy0, wx1, wy1 = crop_window(bbox, W, H)
    patch = image[:, wy0:wy1, wx0:wx1]
    mpatch = mask[wy0:wy1, wx0:wx1]
    ph, pw = mpatch.shape
    s = min(H / ph, W / pw)
    nh = min(H, max(1, round(ph * s)))
    nw = min(W, max(1, round(pw * s)))
    img = _paste_center(np.full_like(image, pad_value), resize_bilinear(patch, nh, nw))
    m = resize_bilinear(mpatch.astype(np.float64), nh, nw) >= 0.5
    out_mask = _paste_center(np.zeros_like(mask), m.astype(mask.dtype))
    return img, out_mask


def downsize_pad(image: np.ndarray, mask: np.ndarray, factor: float = 0.7,
                 pad_value: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    if not 0 < factor < 1:
        raise ValueError("factor must lie in (0, 1)")
    H, W = mask.shape
    nh, nw = max(1, round(factor * H)), max(1, round(factor * W))
    img = _paste_center(np.full_like(image, pad_value), resize_bilinear(image, nh, nw))
    out_mask = _paste_center(np.zeros_like(mask), resize_nearest(mask, nh, nw))
    return img, out_mask


def decide(mask: np.ndarray, cfg: IdaConfig = IdaConfig()) -> AugmentationDecision:
    mu = foreground_ratio(mask)
    branch = route(mu, cfg)
    if branch != CROP:
        return AugmentationDecision(mu, branch)
    H, W = mask.shape
    bbox = largest_component_bbox(mask)
    return AugmentationDecision(mu, branch, bbox, crop_window(bbox, W, H))


def augment_support(sample: Sample, cfg: IdaConfig = IdaConfig()) -> list[Sample]:
    """``[sample]`` when IDA is not triggered, else ``[sample, augmented]``."""
    d = decide(sample.mask, cfg)
    if d.branch == NONE:
        return [sample]
    if d.branch == CROP:
        H, W = sample.mask.shape
        img, m = instance_crop(sample.image, sample.mask, d.bbox, W, H, cfg.pad_value)
    else:
        img, m = downsize_pad(sample.image, sample.mask, cfg.downsize_factor, cfg.pad_value)
    return [sample, replace(sample, image=img, mask=m, branch=d.branch)]
