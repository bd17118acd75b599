"""Toy encoder / decoder / pixel classifier.

=======  ========  ======  ========
block    channels  stride  output
=======  ========  ======  ========
1        3 -> 8    1       64 x 64
2        8 -> 16   2       32 x 32
3        16 -> 24  2       16 x 16
4        24 -> 32  2       8 x 8
5        32 -> 48  1 (d=2) 8 x 8
decoder  48 -> 32  1x1     8 x 8
=======  ========  ======  ========
"""
from __future__ import annotations

import numpy as np

from . import core as C
from . import rng as rng_mod
from .optim import checksum

IMAGE_SIZE = 64
# (c_in, c_out, stride, dilation)
BLOCKS = ((3, 8, 1, 1), (8, 16, 2, 1), (16, 24, 2, 1), (24, 32, 2, 1), (32, 48, 1, 2))
Z_CHANNELS = 32
FEATURE_SHAPES = {1: (8, 64, 64), 2: (16, 32, 32), 3: (24, 16, 16), 4: (32, 8, 8), 5: (48, 8, 8)}


def kaiming_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _param(arr, trainable=True):
    return C.tensor(arr, requires_grad=trainable)


class Backbone:
    """Encoder and decoder parameters (``enc/*``, ``dec/*``)."""

    def __init__(self, params: dict[str, C.Tensor]):
        self.params = params

    @classmethod
    def init(cls, seed: int = 0, zero: bool = False) -> "Backbone":
        params = {}
        for i, (cin, cout, _, _) in enumerate(BLOCKS, 1):
            shape = (cout, cin, 3, 3)
            w = np.zeros(shape) if zero else kaiming_uniform(rng_mod.stream(seed, "init", f"enc/block{i}"), shape)
            params[f"enc/block{i}/w"] = _param(w)
            params[f"enc/block{i}/b"] = _param(np.zeros(cout))
        shape = (Z_CHANNELS, BLOCKS[-1][1], 1, 1)
        w = np.zeros(shape) if zero else kaiming_uniform(rng_mod.stream(seed, "init", "dec"), shape)
        params["dec/w"] = _param(w)
        params["dec/b"] = _param(np.zeros(Z_CHANNELS))
        return cls(params)

    def freeze(self) -> "Backbone":
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def checksum(self) -> str:
        return checksum(self.params)

    def encode(self, image) -> list[C.Tensor]:
        """Return ``[f1, ..., f5]`` for an image ``[3,64,64]`` (or a batch ``[n,3,64,64]``)."""
        x = C.as_tensor(image)
        if x.shape[-3:] != (3, IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(f"expected image [3,{IMAGE_SIZE},{IMAGE_SIZE}], got {x.shape}")
        feats = []
        for i, (_, _, stride, dil) in enumerate(BLOCKS, 1):
            x = C.relu(C.conv2d(x, self.params[f"enc/block{i}/w"], self.params[f"enc/block{i}/b"],
                                stride=stride, pad=dil, dilation=dil))
            feats.append(x)
        return feats

    def decode(self, f5) -> C.Tensor:
        f5 = C.as_tensor(f5)
        if f5.shape[-3:] != FEATURE_SHAPES[5]:
            raise ValueError(f"expected f5 {FEATURE_SHAPES[5]}, got {f5.shape}")
        return C.relu(C.conv2d(f5, self.params["dec/w"], self.params["dec/b"]))

    def features(self, image) -> tuple[list[C.Tensor], C.Tensor]:
        feats = self.encode(image)
        return feats, self.decode(feats[-1])


def init_head(n_classes: int, seed: int = 0, name: str = "head", zero: bool = False) -> dict[str, C.Tensor]:
    shape = (n_classes, Z_CHANNELS, 1, 1)
    w = np.zeros(shape) if zero else kaiming_uniform(rng_mod.stream(seed, "init", name), shape)
    return {"w": _param(w), "b": _param(np.zeros(n_classes))}


def init_classifier() -> dict[str, C.Tensor]:
    """Fresh zero-initialised 2-way classifier."""
    return init_head(2, zero=True)


def classify(z, theta: dict[str, C.Tensor]) -> C.Tensor:
    """1x1 conv to class logits, then bilinear upsampling to 64 x 64."""
    z = C.as_tensor(z)
    if z.shape[-3:] != (Z_CHANNELS, 8, 8):
        raise ValueError(f"expected [{Z_CHANNELS},8,8] features, got {z.shape}")
    logits = C.conv2d(z, theta["w"], theta["b"])
    return C.bilinear_resize2d(logits, IMAGE_SIZE, IMAGE_SIZE)


def predict_mask(logits: np.ndarray) -> np.ndarray:
    """Foreground only where its logit is strictly larger (ties go to background)."""
    return (logits[..., 1, :, :] > logits[..., 0, :, :]).astype(np.float32)
