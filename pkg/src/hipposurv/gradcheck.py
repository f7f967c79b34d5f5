"""Central finite-difference checks for the layer kernels."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .errors import PreconditionError

LAYERS = ("conv3d", "maxpool3d", "batch_norm", "relu", "gap", "fully_connected", "dropout", "softmax_cross_entropy")

# Components whose analytic and numeric gradients are both below this are
# compared on an absolute scale instead of a relative one.
ABS_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    layer: str
    tolerance: float
    errors: dict = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic, numeric, floor=ABS_FLOOR):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def numeric_gradient(f, arrays, name, h=1e-4):
    """Central differences of scalar ``f()`` with respect to ``arrays[name]`` (perturbed in place)."""
    a = arrays[name]
    grad = np.zeros_like(a, dtype=np.float64)
    it = np.nditer(a, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = a[idx]
        a[idx] = old + h
        fp = f()
        a[idx] = old - h
        fm = f()
        a[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def random_instance(layer, rng):
    """A small float64 instance for ``layer``."""
    r = rng.standard_normal
    if layer == "conv3d":
        return {"x": r((2, 2, 4, 3, 4)), "kernels": r((3, 2, 3, 3, 3)), "bias": r(3), "padding": 1, "stride": 1}
    if layer == "maxpool3d":
        return {"x": r((2, 2, 4, 4, 5))}
    if layer == "batch_norm":
        return {"x": r((3, 4, 2, 3, 2)) * 2 + 1, "gamma": r(3), "beta": r(3)}
    if layer == "relu":
        x = r((2, 2, 3, 3, 3))
        # keep clear of the kink so +-h never crosses zero
        x[np.abs(x) < 0.01] = 0.5
        return {"x": x}
    if layer == "gap":
        return {"x": r((3, 2, 3, 2, 4))}
    if layer == "fully_connected":
        return {"x": r((4, 6)), "weight": r((2, 6)), "bias": r(2)}
    if layer == "dropout":
        return {"x": r((5, 8)), "ratio": 0.5, "seed": int(rng.integers(2**31))}
    if layer == "softmax_cross_entropy":
        return {"logits": r((4, 2)), "labels": rng.integers(0, 2, size=4)}
    raise PreconditionError(f"unknown layer {layer!r}")


def finite_difference_check(layer, instance=None, tolerance=1e-4, h=1e-4, seed=0) -> GradCheckReport:
    """Compare analytic gradients of ``layer`` against central differences.

    The scalar probed is ``sum(u * out)`` for a fixed random ``u`` (or the loss
    itself for ``softmax_cross_entropy``), so every output coordinate matters.
    All arrays are promoted to float64.
    """
    if not tolerance > 0:
        raise PreconditionError("tolerance must be positive")
    rng = np.random.default_rng(seed)
    inst = random_instance(layer, rng) if instance is None else dict(instance)
    for k, v in inst.items():
        if isinstance(v, np.ndarray) and v.dtype.kind == "f":
            inst[k] = v.astype(np.float64).copy()
    forward, analytic = _BUILDERS[layer](inst, rng)
    report = GradCheckReport(layer, tolerance)
    for name, grad in analytic.items():
        num = numeric_gradient(forward, inst, name, h)
        report.errors[name] = relative_error(grad, num)
    return report


def _conv(inst, rng):
    pad, stride = inst.get("padding", 0), inst.get("stride", 1)

    def out():
        return L.conv3d(inst["x"], inst["kernels"], inst["bias"], pad, stride)

    u = rng.standard_normal(out().shape)
    _, cache = L.conv3d_forward(inst["x"], inst["kernels"], inst["bias"], pad, stride)
    dx, dw, db = L.conv3d_backward(u, cache)
    return (lambda: float(np.sum(u * out()))), {"x": dx, "kernels": dw, "bias": db}


def _pool(inst, rng):
    def out():
        return L.maxpool3d(inst["x"])[0]

    u = rng.standard_normal(out().shape)
    _, arg = L.maxpool3d(inst["x"])
    return (lambda: float(np.sum(u * out()))), {"x": L.maxpool3d_backward(u, arg, inst["x"].shape)}


def _bn(inst, rng):
    c = inst["x"].shape[0]

    def fresh():
        return L.BatchNormState(np.zeros(c), np.ones(c))

    def out():
        return L.batch_norm(inst["x"], inst["gamma"], inst["beta"], fresh(), "train")

    u = rng.standard_normal(out().shape)
    _, cache = L.batch_norm_forward(inst["x"], inst["gamma"], inst["beta"], fresh(), "train")
    dx, dg, db = L.batch_norm_backward(u, cache)
    return (lambda: float(np.sum(u * out()))), {"x": dx, "gamma": dg, "beta": db}


def _relu(inst, rng):
    def out():
        return L.relu(inst["x"])

    u = rng.standard_normal(out().shape)
    return (lambda: float(np.sum(u * out()))), {"x": L.relu_backward(u, out())}


def _gap(inst, rng):
    def out():
        return L.gap(inst["x"])

    u = rng.standard_normal(out().shape)
    return (lambda: float(np.sum(u * out()))), {"x": L.gap_backward(u, inst["x"].shape)}


def _fc(inst, rng):
    def out():
        return L.fully_connected(inst["x"], inst["weight"], inst["bias"])

    u = rng.standard_normal(out().shape)
    dx, dw, db = L.fully_connected_backward(u, inst["x"], inst["weight"])
    return (lambda: float(np.sum(u * out()))), {"x": dx, "weight": dw, "bias": db}


def _dropout(inst, rng):
    def out():
        # same seed each call: the mask is fixed, the map is linear
        return L.dropout(inst["x"], inst["ratio"], "train", np.random.default_rng(inst["seed"]))[0]

    u = rng.standard_normal(out().shape)
    _, mask = L.dropout(inst["x"], inst["ratio"], "train", np.random.default_rng(inst["seed"]))
    return (lambda: float(np.sum(u * out()))), {"x": u * mask}


def _softmax(inst, rng):
    def out():
        return L.softmax_cross_entropy(inst["logits"], inst["labels"])[0]

    _, grad = L.softmax_cross_entropy(inst["logits"], inst["labels"])
    return out, {"logits": grad}


_BUILDERS = {
    "conv3d": _conv,
    "maxpool3d": _pool,
    "batch_norm": _bn,
    "relu": _relu,
    "gap": _gap,
    "fully_connected": _fc,
    "dropout": _dropout,
    "softmax_cross_entropy": _softmax,
}
