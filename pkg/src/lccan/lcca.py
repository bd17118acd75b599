"""Local-consensus guided cross attention.

Query features are aligned to support features through a refined 4D
correlation map:

    f~ = f + G(sum_ab softmax_ab(q_ij . k_ab) v_ab)          (local self-attention)
    C_l(i,j,a,b) = cos(f~q(i,j), f~s(a,b))                   (per pyramid layer)
    C~ = H(relu(stack_l resize(C_l)))                        (center-pivot 4D convs)
    z_att(i,j) = sum_ab softmax_ab(tau * C~(i,j,a,b)) z_s(a,b)
    z~q = (1 - gamma) z_q + gamma z_att
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core as C
from . import rng as rng_mod
from .backbone import FEATURE_SHAPES
from .optim import checksum

SIZE = 8
CORR_CHANNELS = (16, 16, 1)


@dataclass(frozen=True)
class AlignConfig:
    tau: float = 10.0
    gamma: float = 0.1
    layers: tuple = (4, 5)
    use_lsa: bool = True
    k: int = 3

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")
        if not self.layers:
            raise ValueError("at least one pyramid layer is required")
        if not set(self.layers) <= {3, 4, 5}:
            raise ValueError("layers must be drawn from {3, 4, 5}")
        if self.k % 2 == 0:
            raise ValueError("neighborhood size must be odd")
        object.__setattr__(self, "layers", tuple(sorted(self.layers)))


# ---------------------------------------------------------------- local self-attention

def _pointwise(w: C.Tensor, x: C.Tensor) -> C.Tensor:
    c, h, wd = x.shape
    return C.reshape(C.matmul(w, C.reshape(x, (c, h * wd))), (w.shape[0], h, wd))


def lsa_attention(f: C.Tensor, params: dict, k: int = 3):
    """Return (attention weights ``[k*k,h,w]``, attended values ``[c,h,w]``)."""
    c, h, w = f.shape
    if params["wq"].shape != (c, c):
        raise ValueError(f"LSA params are for {params['wq'].shape[0]} channels, feature has {c}")
    q = _pointwise(params["wq"], f)
    keys = C.neighborhood(_pointwise(params["wk"], f), k)      # kk,c,h,w
    vals = C.neighborhood(_pointwise(params["wv"], f), k)
    logits = C.sum(C.mul(C.reshape(q, (1, c, h, w)), keys), axis=1)  # kk,h,w
    attn = C.softmax(logits, axis=0, mask=C.neighborhood_mask(h, w, k))
    out = C.sum(C.mul(C.reshape(attn, (k * k, 1, h, w)), vals), axis=0)
    return attn, out


def local_self_attention(f, params: dict, k: int = 3) -> C.Tensor:
    f = C.as_tensor(f)
    _, attended = lsa_attention(f, params, k)
    c = f.shape[0]
    g = C.add(_pointwise(params["g_w"], attended), C.reshape(params["g_b"], (c, 1, 1)))
    return C.add(f, g)


# ---------------------------------------------------------------- correlation

def correlation_map(fq, fs) -> C.Tensor:
    """Cosine similarity of every query pixel with every support pixel: ``[h,w,h,w]``."""
    fq, fs = C.as_tensor(fq), C.as_tensor(fs)
    if fq.shape[0] != fs.shape[0]:
        raise ValueError("channel mismatch between query and support features")
    c, h, w = fq.shape
    _, hs, ws = fs.shape
    nq = C.reshape(C.l2_normalize(fq, axis=0), (c, h * w))
    ns = C.reshape(C.l2_normalize(fs, axis=0), (c, hs * ws))
    return C.reshape(C.matmul(C.transpose(nq), ns), (h, w, hs, ws))


def resize4d(corr: C.Tensor, size: int = SIZE) -> C.Tensor:
    """Bilinear resize of ``[h,w,h',w']`` over query dims, then support dims."""
    h, w, hs, ws = corr.shape
    x = C.bilinear_resize2d(C.transpose(corr, (2, 3, 0, 1)), size, size)  # hs,ws,S,S
    x = C.bilinear_resize2d(C.transpose(x, (2, 3, 0, 1)), size, size)     # S,S,S,S
    return x


def correlation_stack(pyr_q, pyr_s, params: dict, cfg: AlignConfig) -> C.Tensor:
    """Unclamped ``[L',8,8,8,8]`` stack, layers in ascending order."""
    maps = []
    for layer in cfg.layers:
        fq, fs = pyr_q[layer - 1], pyr_s[layer - 1]
        if cfg.use_lsa:
            lp = lsa_params(params, layer)
            fq = local_self_attention(fq, lp, cfg.k)
            fs = local_self_attention(fs, lp, cfg.k)
        maps.append(resize4d(correlation_map(fq, fs)))
    return C.stack(maps, axis=0)


def build_correlation(pyr_q, pyr_s, params: dict, cfg: AlignConfig) -> C.Tensor:
    """Raw multi-layer correlation with negative similarities clamped to zero."""
    return C.relu(correlation_stack(pyr_q, pyr_s, params, cfg))


# ---------------------------------------------------------------- 4D consensus

def center_pivot_conv4d(corr, w1, w2) -> C.Tensor:
    """Sparse 4D conv: a 2D kernel over query dims plus a 2D kernel over support dims.

    ``corr`` is ``[c_in,h,w,h',w']``; ``w1``/``w2`` are ``[c_out,c_in,k,k]``.
    Zero padding on all four spatial dims.
    """
    corr, w1, w2 = C.as_tensor(corr), C.as_tensor(w1), C.as_tensor(w2)
    k = w1.shape[-1]
    if k % 2 == 0 or w2.shape[-1] != k:
        raise ValueError("kernels must share an odd size")
    cin, h, w, hs, ws = corr.shape
    cout = w1.shape[0]
    pad = k // 2
    # query-dim branch: support positions act as the batch
    x = C.reshape(C.transpose(corr, (3, 4, 0, 1, 2)), (hs * ws, cin, h, w))
    y1 = C.reshape(C.conv2d(x, w1, pad=pad), (hs, ws, cout, h, w))
    y1 = C.transpose(y1, (2, 3, 4, 0, 1))
    # support-dim branch: query positions act as the batch
    x = C.reshape(C.transpose(corr, (1, 2, 0, 3, 4)), (h * w, cin, hs, ws))
    y2 = C.reshape(C.conv2d(x, w2, pad=pad), (h, w, cout, hs, ws))
    y2 = C.transpose(y2, (2, 0, 1, 3, 4))
    return C.add(y1, y2)


def refine_correlation(raw, params: dict) -> C.Tensor:
    raw = C.as_tensor(raw)
    x = raw
    n = len(CORR_CHANNELS)
    if params["lcca/corr/unit1/w1"].shape[1] != raw.shape[0]:
        raise ValueError("correlation channels do not match the consensus network")
    for u in range(1, n + 1):
        x = center_pivot_conv4d(x, params[f"lcca/corr/unit{u}/w1"], params[f"lcca/corr/unit{u}/w2"])
        if u < n:
            x = C.relu(x)
    return C.reshape(x, x.shape[1:])


# ---------------------------------------------------------------- alignment

def attention_weights(refined, tau: float) -> C.Tensor:
    """``[hw_q, hw_s]`` row-stochastic cross attention."""
    refined = C.as_tensor(refined)
    h, w, hs, ws = refined.shape
    return C.softmax(C.scale(C.reshape(refined, (h * w, hs * ws)), tau), axis=1)


def align(refined, z_s, tau: float) -> C.Tensor:
    refined, z_s = C.as_tensor(refined), C.as_tensor(z_s)
    h, w, hs, ws = refined.shape
    c = z_s.shape[0]
    if z_s.shape[1:] != (hs, ws):
        raise ValueError("support feature extent does not match the correlation map")
    attn = attention_weights(refined, tau)
    out = C.matmul(C.reshape(z_s, (c, hs * ws)), C.transpose(attn))  # c, hw_q
    return C.reshape(out, (c, h, w))


def blend(z_q, z_att, gamma: float) -> C.Tensor:
    z_q, z_att = C.as_tensor(z_q), C.as_tensor(z_att)
    if z_q.shape != z_att.shape and z_q.ndim and z_att.ndim:
        raise ValueError("blend operands differ in shape")
    return C.add(C.scale(z_q, 1.0 - gamma), C.scale(z_att, gamma))


# ---------------------------------------------------------------- parameters

def lsa_params(params: dict, layer: int) -> dict:
    pre = f"lcca/lsa{layer}/"
    return {k: params[pre + k] for k in ("wq", "wk", "wv", "g_w", "g_b")}


def init_params(cfg: AlignConfig = AlignConfig(), seed: int = 0) -> dict[str, C.Tensor]:
    params = {}

    def draw(name, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        arr = rng_mod.stream(seed, "init", name).uniform(-bound, bound, size=shape)
        params[name] = C.tensor(arr, requires_grad=True)

    for layer in cfg.layers if cfg.use_lsa else ():
        c = FEATURE_SHAPES[layer][0]
        for k in ("wq", "wk", "wv", "g_w"):
            draw(f"lcca/lsa{layer}/{k}", (c, c), c)
        params[f"lcca/lsa{layer}/g_b"] = C.tensor(np.zeros(c), requires_grad=True)
    cin = len(cfg.layers)
    for u, cout in enumerate(CORR_CHANNELS, 1):
        for branch in ("w1", "w2"):
            draw(f"lcca/corr/unit{u}/{branch}", (cout, cin, 3, 3), 2 * cin * 9)
        cin = cout
    return params


class LCCA:
    """LCCA parameters together with their alignment settings."""

    def __init__(self, params: dict[str, C.Tensor], cfg: AlignConfig = AlignConfig()):
        self.params = params
        self.cfg = cfg

    @classmethod
    def init(cls, cfg: AlignConfig = AlignConfig(), seed: int = 0) -> "LCCA":
        return cls(init_params(cfg, seed), cfg)

    def checksum(self) -> str:
        return checksum(self.params)

    def refined(self, pyr_q, pyr_s) -> C.Tensor:
        return refine_correlation(build_correlation(pyr_q, pyr_s, self.params, self.cfg), self.params)

    def attend(self, pyr_q, pyr_s, z_s) -> C.Tensor:
        """``z_att`` for one support."""
        return align(self.refined(pyr_q, pyr_s), z_s, self.cfg.tau)

    def kshot_align(self, query_pyr, supports, z_q, gamma: float | None = None) -> C.Tensor:
        """Blend ``z_q`` with the mean of per-support attention features.

        ``supports`` is a list of ``(pyramid, z_s)`` pairs.
        """
        if not supports:
            raise ValueError("empty support list")
        gamma = self.cfg.gamma if gamma is None else gamma
        atts = [self.attend(query_pyr, pyr, z_s) for pyr, z_s in supports]
        mean_att = atts[0] if len(atts) == 1 else C.scale(C.sum(C.stack(atts), axis=0), 1.0 / len(atts))
        return blend(z_q, mean_att, gamma)
