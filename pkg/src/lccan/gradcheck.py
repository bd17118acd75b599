"""Central-difference verification of analytic adjoints."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import OPS, MissingAdjointError, Tensor

STEP = 1e-5


@dataclass
class GradReport:
    errors: list[float] = field(default_factory=list)
    tol: float = 1e-5

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        errs = ", ".join(f"{e:.2e}" for e in self.errors)
        return f"{status} max_rel_err={self.max_error:.3e} (tol {self.tol:g}) per-input [{errs}]"


def grad_check(op: str | Callable[..., Tensor], inputs: Sequence[Tensor], tol: float = 1e-5,
               seed: int = 0, probes: int | None = None, step: float = STEP,
               **kwargs) -> GradReport:
    """Compare backprop gradients of ``op(*inputs, **kwargs)`` with central differences.

    The output is reduced to a scalar through a fixed random projection. Inputs
    must be float64 tensors with ``requires_grad`` set. Relative error for an
    input is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``.
    With ``probes`` set, only that many fixed random entries per input are
    differenced (for inputs too large to sweep).
    """
    if isinstance(op, str):
        if op not in OPS:
            raise MissingAdjointError(f"no registered adjoint for op {op!r}")
        op = OPS[op]
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("grad_check requires float64 inputs")

    out = op(*inputs, **kwargs)
    if not out.requires_grad:
        raise MissingAdjointError("output is not differentiable w.r.t. the inputs")
    proj = np.random.default_rng(seed).standard_normal(out.shape)

    def scalar() -> float:
        return float((op(*inputs, **kwargs).data * proj).sum())

    for t in inputs:
        t.grad = None
    out.backward(proj)

    report = GradReport(tol=tol)
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = (np.zeros_like(t.data) if t.grad is None else t.grad).reshape(-1)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if probes is not None and probes < flat.size:
            idx = np.sort(np.random.default_rng(seed + 1).choice(flat.size, probes, replace=False))
        analytic = analytic[idx]
        numeric = np.zeros_like(analytic)
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = scalar()
            flat[i] = orig - step
            fm = scalar()
            flat[i] = orig
            numeric[n] = (fp - fm) / (2 * step)
        denom = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
        report.errors.append(float(np.abs(analytic - numeric).max() / denom))
    return report


# ---------------------------------------------------------------- standard suite

def _away_from_zero(rng, shape, lo=0.2):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, 1.0, size=shape)


def _cases(rng) -> dict:
    """Per-op ``(inputs, kwargs)`` builders; inputs are plain arrays."""
    n = lambda *s: rng.standard_normal(s)  # noqa: E731
    mask = np.ones((4, 5), bool)
    mask[0, 1:] = False
    return {
        "add": ([n(3, 4), n(4)], {}),
        "sub": ([n(3, 4), n(3, 1)], {}),
        "mul": ([n(3, 4), n(3, 4)], {}),
        "div": ([n(3, 4), rng.uniform(0.5, 2.0, (4,)) * rng.choice([-1.0, 1.0], 4)], {}),
        "neg": ([n(5)], {}),
        "scale": ([n(2, 3)], {"c": -1.7}),
        "exp": ([n(2, 3)], {}),
        "log": ([rng.uniform(0.5, 2.0, (2, 3))], {}),
        "relu": ([_away_from_zero(rng, (3, 4))], {}),
        "reshape": ([n(2, 6)], {"shape": (3, 4)}),
        "transpose": ([n(2, 3, 4)], {"axes": (2, 0, 1)}),
        "index": ([n(4, 5)], {"key": (slice(1, 3), [0, 2, 4])}),
        "stack": ([n(2, 3), n(2, 3), n(2, 3)], {"axis": 1}),
        "sum": ([n(3, 4)], {"axis": 1}),
        "mean": ([n(3, 4)], {"axis": 0, "keepdims": True}),
        "matmul": ([n(3, 4), n(4, 2)], {}),
        "softmax": ([n(4, 5)], {"axis": 1, "mask": mask}),
        "log_softmax": ([n(4, 5)], {"axis": 0}),
        "l2_normalize": ([n(4, 3, 3)], {"axis": 0}),
        "conv2d": ([n(2, 5, 5), n(3, 2, 3, 3), n(3)], {"stride": 2, "pad": 2, "dilation": 2}),
        "bilinear_resize2d": ([n(2, 3, 5)], {"out_h": 7, "out_w": 4}),
        "neighborhood": ([n(2, 4, 4)], {"k": 3}),
    }


def _wrap(name, n_in):
    fn = OPS[name]
    if name == "stack":
        return lambda *xs, **kw: fn(list(xs), **kw)
    return fn


def composite_case(seed: int):
    """LCCA alignment path as a function of a few parameter blocks."""
    from . import core as C
    from .lcca import LCCA, AlignConfig

    rng = np.random.default_rng(seed)
    shapes = [(8, 64, 64), (16, 32, 32), (24, 16, 16), (32, 8, 8), (48, 8, 8)]
    with C.precision(np.float64):
        model = LCCA.init(AlignConfig(), seed=seed)
        pq = [C.tensor(rng.standard_normal(s)) for s in shapes]
        ps = [C.tensor(rng.standard_normal(s)) for s in shapes]
        zs, zq = C.tensor(rng.random((32, 8, 8))), C.tensor(rng.random((32, 8, 8)))
    names = ["lcca/lsa4/wq", "lcca/lsa5/g_w", "lcca/corr/unit1/w2", "lcca/corr/unit3/w1"]

    def path(*ws):
        for name, w in zip(names, ws):
            model.params[name] = w
        return model.kshot_align(pq, [(ps, zs)], zq, gamma=1.0)
    return path, [model.params[k] for k in names]


def run_suite(seeds=range(5), ops=None, composite: bool = True, tol=1e-5, composite_tol=1e-4):
    """Gradient-check every registered op (and the LCCA path) over ``seeds``.

    Returns ``{name: [GradReport per seed]}``. The composite path differences
    12 probed coordinates per block with a 1e-7 step, small enough to avoid
    crossing ReLU kinks.
    """
    from .core import tensor

    names = sorted(OPS) if ops is None else list(ops)
    results = {}
    for seed in seeds:
        cases = _cases(np.random.default_rng(seed))
        for name in names:
            if name not in cases:
                raise MissingAdjointError(f"no gradient case for op {name!r}")
            arrays, kwargs = cases[name]
            inputs = [tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
            rep = grad_check(_wrap(name, len(inputs)), inputs, tol=tol, seed=seed, **kwargs)
            results.setdefault(name, []).append(rep)
        if composite:
            path, tensors = composite_case(seed)
            rep = grad_check(path, tensors, tol=composite_tol, seed=seed, probes=12, step=1e-7)
            results.setdefault("lcca_path", []).append(rep)
    return results
