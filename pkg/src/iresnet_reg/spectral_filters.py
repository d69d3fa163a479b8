"""Analytic filter families and the closed-form trained networks that realize them.

A diagonal iResNet acts on a data coefficient ``s = sigma_j <y, u_j>`` via a
filter ``r_L(sigma_j^2, s)`` so that the reconstruction coefficient is
``r * s``. The four families below are the optima of approximation
training for a one-parameter, an affine, a ReLU and a soft-thresholding
architecture.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .exceptions import DatasetAssumptionError, DegenerateModeError, DimMismatchError
from .iresnet_core import DiagonalResidualNet
from .operator_core import SingularSystem

__all__ = [
    "FAMILIES",
    "ClosedFormNet",
    "FilterSpec",
    "big_F_from_r",
    "bias_regularization_check",
    "closed_form_affine",
    "closed_form_one_param",
    "closed_form_relu",
    "closed_form_soft_threshold",
    "eval_on_training_ray",
    "filter_curve",
    "filter_reconstruction",
    "piecewise_linear_extension",
    "relu_filter",
    "soft_threshold_filter",
    "soft_threshold_ray",
    "squared_soft_tsvd",
    "tikhonov_filter",
    "tsvd_bias",
    "write_filter_csv",
]

FAMILIES = ("tikhonov", "squared_soft_tsvd", "relu", "soft_threshold")


def _check_L(L, allow_zero=True):
    lo_ok = L >= 0 if allow_zero else L > 0
    if not (lo_ok and L < 1):
        raise ValueError(f"L must lie in {'[' if allow_zero else '('}0, 1), got {L}")


def tikhonov_filter(sigma_sq, s=None, L: float = 0.9):
    """``1 / (1 - L + L sigma^2)``; independent of ``s``."""
    _check_L(L, allow_zero=False)
    return 1.0 / (1.0 - L + L * np.asarray(sigma_sq, dtype=np.float64))


def squared_soft_tsvd(sigma_sq, L: float):
    """``1 / max(sigma^2, 1 - L)``."""
    _check_L(L)
    return 1.0 / np.maximum(np.asarray(sigma_sq, dtype=np.float64), 1.0 - L)


def tsvd_bias(L: float, sigma_sq, mu) -> np.ndarray:
    """Bias coefficients ``(1 - L - sigma_j^2) / (1 - L) * mu_j`` on modes with ``sigma_j^2 < 1 - L``."""
    _check_L(L)
    sigma_sq = np.asarray(sigma_sq, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if sigma_sq.shape != mu.shape:
        raise DimMismatchError("sigma_sq and mu must have the same shape")
    gap = 1.0 - L - sigma_sq
    return np.where(gap > 0, gap / (1.0 - L), 0.0) * mu


def relu_filter(sigma_sq, s, L: float):
    """Squared soft TSVD for ``s >= 0`` and 1 for ``s < 0``."""
    _check_L(L)
    s = np.asarray(s, dtype=np.float64)
    return np.where(s >= 0, squared_soft_tsvd(sigma_sq, L), 1.0)


def _soft_weight(sigma_sq, L, alpha, p):
    sigma_sq = np.asarray(sigma_sq, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(alpha == 0, 0.0, alpha / np.asarray(p, dtype=np.float64))
    w = np.minimum(ratio + 1.0 - sigma_sq, L)
    if np.any(w < 0) or np.any((w == 0) & (alpha > 0)):
        raise DegenerateModeError("soft-threshold weight w_j must be positive when alpha_j > 0")
    return w, ratio


def soft_threshold_filter(sigma_sq, s, L: float, alpha, p):
    """Data-dependent filter of the soft-thresholding network.

    With ``w = min(alpha/p + 1 - sigma^2, L)``: returns 1 when
    ``|s| <= alpha / w`` and ``(|s| - alpha) / (|s| max(sigma^2 - alpha/p, 1 - L))``
    otherwise. A zero weight (``f_j == 0``) gives 1.
    """
    _check_L(L)
    w, ratio = _soft_weight(sigma_sq, L, alpha, p)
    sigma_sq = np.asarray(sigma_sq, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    a = np.abs(np.asarray(s, dtype=np.float64))
    denom = np.maximum(sigma_sq - ratio, 1.0 - L)
    with np.errstate(divide="ignore", invalid="ignore"):
        active = (w > 0) & (a * w > alpha)
        value = (a - alpha) / (np.where(a == 0, 1.0, a) * denom)
    return np.where(active, value, 1.0)


def soft_threshold_ray(sigma_sq, L: float, alpha_over_p):
    """Three-regime closed form of the soft-threshold filter at ``s = p sigma^2``."""
    _check_L(L, allow_zero=False)
    sigma_sq = np.asarray(sigma_sq, dtype=np.float64)
    q = np.asarray(alpha_over_p, dtype=np.float64)
    lower = q / L
    upper = q + 1.0 - L
    with np.errstate(divide="ignore", invalid="ignore"):
        middle = (1.0 - q / sigma_sq) / (1.0 - L)
        top = 1.0 / sigma_sq
    return np.where(sigma_sq <= lower, 1.0, np.where(sigma_sq <= upper, middle, top))


def piecewise_linear_extension(sigma_sq_modes, values) -> Callable:
    """Continuous extension of per-mode values: linear in ``sigma^2``, constant outside."""
    x = np.asarray(sigma_sq_modes, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    order = np.argsort(x)
    x, y = x[order], y[order]
    return lambda s2: np.interp(s2, x, y)


def eval_on_training_ray(sigma_sq, L: float, alpha_fn: Callable, p_fn: Callable,
                         gamma: float = 1.0):
    """Soft-threshold filter at ``s = gamma p_L(sigma^2) sigma^2``."""
    sigma_sq = np.asarray(sigma_sq, dtype=np.float64)
    p = p_fn(sigma_sq)
    return soft_threshold_filter(sigma_sq, gamma * p * sigma_sq, L, alpha_fn(sigma_sq), p)


def big_F_from_r(sigma, s, r_fn: Callable):
    """``F_L(sigma, s) = sigma^2 r_L(sigma^2, sigma s)``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    return sigma**2 * r_fn(sigma**2, sigma * np.asarray(s, dtype=np.float64))


@dataclass
class FilterSpec:
    """One filter family with its parameters; arrays are per mode."""

    family: str
    L: float
    alpha: np.ndarray | None = None
    mu: np.ndarray | None = None
    p: np.ndarray | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        _check_L(self.L, allow_zero=self.family != "tikhonov")
        for name in ("alpha", "mu", "p"):
            val = getattr(self, name)
            if val is not None:
                setattr(self, name, np.asarray(val, dtype=np.float64))
        if self.alpha is not None and np.any(self.alpha < 0):
            raise ValueError("alpha must be nonnegative")
        if self.family == "soft_threshold" and (self.alpha is None or self.p is None):
            raise ValueError("soft_threshold needs alpha and p")

    def r(self, sigma_sq, s):
        if self.family == "tikhonov":
            return tikhonov_filter(sigma_sq, s, self.L) * np.ones_like(np.asarray(s, dtype=float))
        if self.family == "squared_soft_tsvd":
            return squared_soft_tsvd(sigma_sq, self.L) * np.ones_like(np.asarray(s, dtype=float))
        if self.family == "relu":
            return relu_filter(sigma_sq, s, self.L)
        return soft_threshold_filter(sigma_sq, s, self.L, self.alpha, self.p)

    def bias(self, sigma_sq) -> np.ndarray:
        """Reconstruction bias coefficients (nonzero only for squared soft TSVD with ``mu``)."""
        sigma_sq = np.asarray(sigma_sq, dtype=np.float64)
        if self.family == "squared_soft_tsvd" and self.mu is not None:
            return tsvd_bias(self.L, sigma_sq, self.mu)
        return np.zeros_like(sigma_sq)


def filter_reconstruction(y, system: SingularSystem, spec: FilterSpec) -> np.ndarray:
    """``sum_j (r(sigma_j^2, s_j) s_j + b_j) v_j`` with ``s_j = sigma_j <y, u_j>``."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != system.u.shape[0]:
        raise DimMismatchError(f"data has last axis {y.shape[-1]}, system expects {system.u.shape[0]}")
    s = system.data_coefficients(y)
    coef = spec.r(system.sigma_sq, s) * s + spec.bias(system.sigma_sq)
    return system.synthesize(coef)


class ClosedFormNet(DiagonalResidualNet):
    """Diagonal net ``f_j(t) = act(w_j t + b_j)`` with analytically trained parameters.

    ``activation`` is ``None`` (linear), ``"relu"`` or ``"soft"`` (soft
    thresholding with per-mode ``alpha``).
    """

    def __init__(self, basis: SingularSystem, L: float, family: str, w, b=None,
                 activation=None, alpha=None, k: float | None = None, stats: dict | None = None):
        super().__init__(basis, L)
        self.family = family
        self.w = np.asarray(w, dtype=np.float64)
        self.b = np.zeros(basis.n) if b is None else np.asarray(b, dtype=np.float64)
        self.activation = activation
        self.alpha = np.zeros(basis.n) if alpha is None else np.asarray(alpha, dtype=np.float64)
        self.k = k
        self.stats = stats or {}
        if self.w.shape != (basis.n,) or self.b.shape != (basis.n,):
            raise DimMismatchError("per-mode parameters must have one entry per mode")

    def mode_residual(self, C):
        z = self.w * np.asarray(C, dtype=np.float64) + self.b
        if self.activation == "relu":
            return np.maximum(z, 0.0)
        if self.activation == "soft":
            return np.sign(z) * np.maximum(np.abs(z) - self.alpha, 0.0)
        return z

    def lipschitz_bound(self) -> np.ndarray:
        return np.abs(self.w)

    def filter_spec(self) -> FilterSpec:
        mu = self.stats.get("mu")
        return FilterSpec(self.family, self.L, alpha=self.alpha if self.family == "soft_threshold" else None,
                          mu=mu, p=self.stats.get("p"))


def closed_form_one_param(basis: SingularSystem, L: float) -> ClosedFormNet:
    """``f = k (Id - A)`` at the training optimum ``k = L``."""
    _check_L(L)
    return ClosedFormNet(basis, L, "tikhonov", w=L * (1.0 - basis.sigma_sq), k=L)


def closed_form_affine(basis: SingularSystem, L: float, mu) -> ClosedFormNet:
    """``w_j = min(1 - sigma_j^2, L)``, ``b_j = max(0, 1 - L - sigma_j^2) mu_j``."""
    _check_L(L)
    s2 = basis.sigma_sq
    mu = np.asarray(mu, dtype=np.float64)
    if mu.shape != s2.shape:
        raise DimMismatchError("mu needs one entry per mode")
    w = np.minimum(1.0 - s2, L)
    b = np.maximum(0.0, 1.0 - L - s2) * mu
    return ClosedFormNet(basis, L, "squared_soft_tsvd", w=w, b=b, stats={"mu": mu})


def closed_form_relu(basis: SingularSystem, L: float) -> ClosedFormNet:
    """``f_j(t) = max(0, w_j t)`` with ``w_j = min(1 - sigma_j^2, L)``."""
    _check_L(L)
    return ClosedFormNet(basis, L, "relu", w=np.minimum(1.0 - basis.sigma_sq, L), activation="relu")


def closed_form_soft_threshold(basis: SingularSystem, L: float, alpha, coefficients) -> ClosedFormNet:
    """Soft-thresholding net fitted to ``coefficients`` of shape ``(N, n)``.

    ``p_j`` averages ``|c|`` weighted by ``|c|`` over samples with
    ``|c| > alpha_j / L``; ``w_j = min(alpha_j / p_j + 1 - sigma_j^2, L)``.
    Statistics ``p`` and ``I_sizes`` are stored in ``net.stats``.
    """
    _check_L(L, allow_zero=False)
    C = np.abs(np.asarray(coefficients, dtype=np.float64))
    if C.ndim != 2 or C.shape[1] != basis.n:
        raise DimMismatchError(f"coefficients must have shape (N, {basis.n})")
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (basis.n,)).copy()
    if np.any(alpha < 0):
        raise ValueError("alpha must be nonnegative")
    mask = C > alpha / L
    sizes = mask.sum(axis=0)
    if np.any(sizes == 0):
        bad = np.flatnonzero(sizes == 0)
        raise DatasetAssumptionError(f"no coefficient exceeds alpha_j / L on modes {bad.tolist()}")
    p = (np.where(mask, C**2, 0.0).sum(axis=0)) / (np.where(mask, C, 0.0).sum(axis=0))
    w = np.minimum(alpha / p + 1.0 - basis.sigma_sq, L)
    return ClosedFormNet(basis, L, "soft_threshold", w=w, activation="soft", alpha=alpha,
                         stats={"p": p, "I_sizes": sizes})


def bias_regularization_check(L_grid: Iterable[float], sigma_sq, mu, family: str = "squared_soft_tsvd",
                              C: float = 1.0, tol: float = 1e-12) -> dict:
    """Check the three conditions for filter-based regularization with bias along ``L -> 1``.

    1. ``r_L(sigma_j^2) -> 1 / sigma_j^2`` for every mode (error sequence
       non-increasing and vanishing or strictly smaller at the end);
    2. ``sigma_j^2 |r_L(sigma_j^2)| <= C``;
    3. ``||b_L|| -> 0``: strictly decreasing while positive and zero at the end.
    """
    L_grid = np.asarray(list(L_grid), dtype=np.float64)
    if L_grid.size < 2 or np.any(np.diff(L_grid) <= 0):
        raise ValueError("L_grid must be strictly increasing with at least two points")
    sigma_sq = np.asarray(sigma_sq, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if family == "squared_soft_tsvd":
        r = np.array([squared_soft_tsvd(sigma_sq, L) for L in L_grid])
        bias = np.array([np.linalg.norm(tsvd_bias(L, sigma_sq, mu)) for L in L_grid])
    elif family == "tikhonov":
        r = np.array([tikhonov_filter(sigma_sq, None, L) for L in L_grid])
        bias = np.zeros(L_grid.size)
    else:
        raise ValueError(f"bias conditions are defined for linear families, not {family!r}")

    err = np.abs(r - 1.0 / sigma_sq).max(axis=1)
    cond1 = bool(np.all(np.diff(err) <= tol) and (err[-1] <= tol or err[-1] < err[0]))
    bound = (sigma_sq * np.abs(r)).max(axis=1)
    cond2 = bool(np.all(bound <= C + tol))
    positive = bias > 0
    strictly = np.all(np.diff(bias)[positive[:-1]] < 0) and np.all(np.diff(bias)[~positive[:-1]] == 0)
    cond3 = bool(strictly and bias[-1] <= tol)
    return {
        "L": L_grid,
        "filter_error": err,
        "sigma_sq_r_max": bound,
        "bias_norm": bias,
        "filter_limit": cond1,
        "bounded": cond2,
        "bias_vanishes": cond3,
        "passed": cond1 and cond2 and cond3,
    }


def filter_curve(family: str, L: float, sigma_sq_grid, gamma: float = 1.0,
                 alpha_over_p: float = 0.1) -> list[dict]:
    """Rows of ``sigma^2 r`` along the ray ``s = gamma p sigma^2`` (``p = 1``, ``alpha = alpha_over_p``)."""
    s2 = np.asarray(sigma_sq_grid, dtype=np.float64)
    s = gamma * s2
    if family == "soft_threshold":
        spec = FilterSpec(family, L, alpha=np.full_like(s2, alpha_over_p), p=np.ones_like(s2))
    else:
        spec = FilterSpec(family, L)
    r = spec.r(s2, s)
    return [
        {"sigma_sq": float(a), "s": float(b), "r": float(c), "sigma_sq_times_r": float(a * c),
         "family": family, "L": float(L), "gamma": float(gamma)}
        for a, b, c in zip(s2, s, r)
    ]


CSV_COLUMNS = ("sigma_sq", "s", "r", "sigma_sq_times_r", "family", "L", "gamma")


def write_filter_csv(path, rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
