"""Central finite-difference checks of the analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad


@dataclass
class GradCheck:
    name: str
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_error.max()) if self.rel_error.size else 0.0


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - b| / max(|a|, |b|, floor), elementwise.

    The floor keeps entries whose true gradient is zero from dividing
    rounding noise by zero.  With h = 1e-4 and O(1) losses the central
    difference carries about 1e-12 of rounding noise, so entries below the
    floor are in effect held to an absolute error of 1e-10.
    """
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def check_gradients(loss_fn: Callable[[dict[str, ad.Tensor]], ad.Tensor], params: dict[str, np.ndarray],
                    h: float = 1e-4, floor: float = 1e-6) -> list[GradCheck]:
    """Compare backprop against central differences for every entry of every parameter.

    ``loss_fn`` receives freshly built leaf tensors and returns a scalar.
    """
    leaves = {k: ad.parameter(v) for k, v in params.items()}
    ad.backward(loss_fn(leaves))
    out = []
    for name, value in params.items():
        analytic = leaves[name].grad
        analytic = np.zeros_like(value) if analytic is None else analytic
        numeric = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            vals = []
            for sign in (1.0, -1.0):
                shifted = {k: v.copy() for k, v in params.items()}
                shifted[name][idx] += sign * h
                consts = {k: ad.tensor(v) for k, v in shifted.items()}
                vals.append(loss_fn(consts).item())
            numeric[idx] = (vals[0] - vals[1]) / (2 * h)
        out.append(GradCheck(name, analytic, numeric, relative_error(analytic, numeric, floor)))
    return out
