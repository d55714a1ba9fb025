"""Link latency models built around a single shared congestion function.

Every link/class pair prices travel time as ``t0_iu * f(z_i)`` where ``z_i``
is the class-weighted volume/capacity ratio of the physical link and ``f`` is
one scalar function shared by the whole network, normalized to ``f(0) = 1``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .network import FlowState, MulticlassNetwork


@dataclass(frozen=True)
class PolynomialCost:
    """Polynomial congestion function f(z) = sum_j beta[j] z^j with f(0)=1.

    ``kernel_c`` records the kernel width used during estimation, when there
    was one; ground-truth instances leave it unset.
    """

    beta: tuple[float, ...]
    kernel_c: float | None = None

    def __post_init__(self):
        if len(self.beta) < 2:
            raise ValueError("polynomial degree must be at least 1")
        if not all(np.isfinite(self.beta)):
            raise ValueError("coefficients must be finite")
        if abs(self.beta[0] - 1.0) > 1e-9:
            raise ValueError(f"constant term must be 1, got {self.beta[0]}")
        if self.kernel_c is not None and self.kernel_c <= 0:
            raise ValueError("kernel width must be positive")

    @property
    def degree(self) -> int:
        return len(self.beta) - 1

    def __call__(self, z):
        return eval_poly(self, z)


LatencyFn = Union[PolynomialCost, Callable[[np.ndarray], np.ndarray]]


def eval_poly(poly: PolynomialCost, z):
    """Evaluate the polynomial by Horner's rule; scalar in, scalar out."""
    arr = np.asarray(z, dtype=float)
    out = np.full_like(arr, poly.beta[-1])
    for b in poly.beta[-2::-1]:
        out = out * arr + b
    return float(out) if np.isscalar(z) or arr.ndim == 0 else out


# shared ground-truth congestion functions used by the benchmark setups
GROUND_TRUTHS: dict[str, PolynomialCost] = {
    # classic quartic volume-delay curve, 15% slowdown at capacity
    "bpr015": PolynomialCost((1.0, 0.0, 0.0, 0.0, 0.15)),
    # pure quartic with unit slope at capacity
    "quartic1": PolynomialCost((1.0, 0.0, 0.0, 0.0, 1.0)),
}


@dataclass(frozen=True)
class CostModel:
    """A latency function bound to a specific multi-class network.

    Construction checks ``f(0) = 1`` (hard error) and scans a grid for
    decreases, which only warn: estimated polynomials may dip slightly
    outside the flow range they were fit on and remain usable.
    """

    network: MulticlassNetwork
    f: LatencyFn
    check_z_max: float = 4.0

    def __post_init__(self):
        f0 = float(self._eval(np.zeros(1))[0])
        if abs(f0 - 1.0) > 1e-9:
            raise ValueError(f"latency function must satisfy f(0) = 1, got {f0}")
        grid = np.linspace(0.0, self.check_z_max, 101)
        vals = self._eval(grid)
        if np.any(np.diff(vals) < -1e-9):
            warnings.warn(
                "latency function decreases somewhere on "
                f"[0, {self.check_z_max}]",
                stacklevel=2,
            )

    def _eval(self, z: np.ndarray) -> np.ndarray:
        out = self.f(z)
        return np.asarray(out, dtype=float)

    def latency(self, flows: FlowState) -> np.ndarray:
        return eval_latency(flows, self)


def congestion_ratio(
    flows: FlowState, i: int, theta: tuple[float, ...], m_i: float
) -> float:
    """Class-weighted volume/capacity ratio of one physical link."""
    if m_i <= 0:
        raise ValueError("capacity must be positive")
    weights = np.asarray(theta, dtype=float)
    if weights.shape != (flows.n_classes,):
        raise ValueError("one weight per class required")
    return float(flows.x[i] @ weights / m_i)


def congestion_ratios(flows: FlowState, net: MulticlassNetwork) -> np.ndarray:
    """Vectorized congestion ratios for every physical link."""
    if flows.x.shape != (net.n_links, net.n_classes):
        raise ValueError(
            f"flow shape {flows.x.shape} does not match network "
            f"({net.n_links}, {net.n_classes})"
        )
    weights = np.asarray(net.classes.theta, dtype=float)
    return (flows.x @ weights) / net.capacity


def eval_latency(flows: FlowState, model: CostModel) -> np.ndarray:
    """Per-link, per-class travel times ``t0_iu * f(z_i)``."""
    net = model.network
    z = congestion_ratios(flows, net)
    return net.t0_class * model._eval(z)[:, None]


def sample_curve(f: LatencyFn, z_max: float, grid_points: int = 101) -> np.ndarray:
    """Tabulate ``f`` on [0, z_max]; returns rows of (z, f(z)).

    A decrease along the grid is reported as a warning rather than an error,
    matching how estimated curves are validated.
    """
    if z_max <= 0:
        raise ValueError("z_max must be positive")
    if grid_points < 2:
        raise ValueError("need at least two grid points")
    z = np.linspace(0.0, z_max, grid_points)
    vals = np.asarray(f(z), dtype=float)
    if np.any(np.diff(vals) < -1e-9):
        warnings.warn(f"sampled function decreases on [0, {z_max}]", stacklevel=2)
    return np.column_stack([z, vals])
