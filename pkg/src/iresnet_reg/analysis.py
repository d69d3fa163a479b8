"""Regularization diagnostics for trained and closed-form iResNets."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .exceptions import DegenerateGridError, DimMismatchError, TooFewSamplesError
from .iresnet_core import ResidualNet, invert
from .operator_core import NoiseModel, SingularSystem
from .spectral_filters import FilterSpec

__all__ = [
    "ApproxErrorRecord",
    "DecayFit",
    "ParamChoice",
    "StudyResult",
    "approx_study",
    "argmin_L",
    "best_by_increasing_delta",
    "convergence_study",
    "error_split",
    "lipschitz_grid",
    "local_approx_error",
    "loglog_decay_fit",
    "mse_reco",
    "noise_levels",
    "param_choice_rule",
    "source_tail",
    "std_mnist",
    "trend_violations",
]


def lipschitz_grid(kind: str = "pow3", max_m: int = 5) -> np.ndarray:
    """``L_m = 1 - base^{-m}`` for ``m = 1..max_m`` with base 2 (``pow2``) or 3 (``pow3``)."""
    base = {"pow2": 2.0, "pow3": 3.0}.get(kind)
    if base is None:
        raise ValueError(f"grid must be 'pow2' or 'pow3', got {kind!r}")
    if max_m < 1:
        raise ValueError("max_m must be >= 1")
    return 1.0 - base ** -np.arange(1, max_m + 1, dtype=np.float64)


def noise_levels(std: float, n_levels: int = 7) -> tuple[np.ndarray, np.ndarray]:
    """Relative levels ``3^{-l}`` (``l > 0``) and 0 (``l = 0``), and their absolute values ``* std``."""
    ell = np.arange(n_levels)
    rel = np.where(ell > 0, 3.0 ** -ell.astype(np.float64), 0.0)
    return rel, rel * std


def local_approx_error(net: ResidualNet, system: SingularSystem, x) -> np.ndarray | float:
    """``||phi(x) - A x||`` per sample."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != system.dim:
        raise DimMismatchError(f"expected last axis {system.dim}, got {x.shape}")
    err = np.linalg.norm(net.forward(x) - system.apply_normal(x), axis=-1)
    return float(err) if np.ndim(err) == 0 else err


@dataclass(frozen=True)
class ApproxErrorRecord:
    L: float
    E_x: np.ndarray
    E_mean: float


def approx_study(nets: Mapping[float, ResidualNet], system: SingularSystem, X) -> list[ApproxErrorRecord]:
    """Per-sample and mean local approximation errors for each ``L``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    out = []
    for L in sorted(nets):
        e = np.atleast_1d(local_approx_error(nets[L], system, X))
        out.append(ApproxErrorRecord(float(L), e, float(e.mean())))
    return out


class DecayFit(NamedTuple):
    slope: float
    intercept: float
    r2: float
    zero_error: bool = False
    n_points: int = 0


def loglog_decay_fit(L_grid, errors, floor: float = 1e-13) -> DecayFit:
    """Least-squares line through ``(log(1 - L), log error)``.

    Points with ``error <= floor`` are dropped. If every error is at the
    floor the fit is reported as ``slope = inf`` with ``zero_error`` set.
    """
    L = np.asarray(L_grid, dtype=np.float64)
    e = np.asarray(errors, dtype=np.float64)
    if L.shape != e.shape or L.size < 3:
        raise DegenerateGridError("need at least 3 matching grid points")
    if np.any(L >= 1) or np.any(e < 0):
        raise DegenerateGridError("grid values must satisfy L < 1 and errors >= 0")
    keep = e > floor
    if not keep.any():
        return DecayFit(np.inf, np.nan, np.nan, True, 0)
    if keep.sum() < 3:
        raise DegenerateGridError(f"only {int(keep.sum())} points above the error floor")
    x = np.log(1.0 - L[keep])
    y = np.log(e[keep])
    if np.ptp(x) == 0:
        raise DegenerateGridError("grid has a single distinct L value")
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss_tot if ss_tot > 0 else 1.0
    return DecayFit(float(slope), float(intercept), float(r2), False, int(keep.sum()))


def source_tail(x, system: SingularSystem, beta: float) -> float:
    """``sum_{j: sigma_j^2 <= beta} <x, v_j>^2``."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    c = system.coefficients(np.asarray(x, dtype=np.float64))
    mask = system.sigma_sq <= beta
    return float(np.sum(c[..., mask] ** 2))


class ParamChoice(NamedTuple):
    L: float
    clamped: bool


def param_choice_rule(delta: float, epsilon: float = 1.0, c: float = 1.0) -> ParamChoice:
    """A-priori rule ``1 - L = min(c delta^{1/(1+eps)}, 0.999999)``, floored at ``L = 0.999999``.

    ``clamped`` flags the ``delta = 0`` boundary.
    """
    if delta < 0 or epsilon <= 0 or c <= 0:
        raise ValueError("need delta >= 0, epsilon > 0, c > 0")
    gap = min(c * delta ** (1.0 / (1.0 + epsilon)), 0.999999)
    if gap <= 1e-6:
        return ParamChoice(0.999999, True)
    return ParamChoice(1.0 - gap, False)


def std_mnist(coefficients) -> float:
    """Sample standard deviation over samples (ddof=1), averaged over modes."""
    C = np.asarray(coefficients, dtype=np.float64)
    if C.ndim == 1:
        C = C[:, None]
    if C.shape[0] < 2:
        raise TooFewSamplesError("need at least 2 samples for a sample standard deviation")
    return float(np.mean(np.std(C, axis=0, ddof=1)))


def _apply_inverse(model, system: SingularSystem, Z, k_max: int) -> np.ndarray:
    if isinstance(model, FilterSpec):
        s = system.coefficients(Z)
        coef = model.r(system.sigma_sq, s) * s + model.bias(system.sigma_sq)
        return system.synthesize(coef) + (Z - system.project(Z))
    return invert(model, Z, k_max=k_max, tol=0.0).x


def mse_reco(model, system: SingularSystem, X, noise: NoiseModel, k_max: int = 30) -> float:
    """``mean_i ||x_i - phi^{-1}(A x_i + eta_i)||^2`` with fresh noise per sample.

    ``model`` is a residual net (inverted by ``k_max`` fixed-point steps) or a
    :class:`FilterSpec` (applied exactly).
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != system.dim:
        raise DimMismatchError(f"expected samples of dimension {system.dim}, got {X.shape[1]}")
    Z = system.apply_normal(X)
    if noise.delta > 0:
        Z = Z + noise.delta * noise.rng().standard_normal(Z.shape)
    R = X - _apply_inverse(model, system, Z, k_max)
    return float(np.mean(np.sum(R * R, axis=1)))


@dataclass
class StudyResult:
    """Append-only table of study rows plus run metadata."""

    columns: tuple
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def append(self, **row):
        if tuple(row) != self.columns:
            raise ValueError(f"row keys {tuple(row)} differ from columns {self.columns}")
        for k, v in row.items():
            if isinstance(v, float) and not np.isfinite(v):
                raise ValueError(f"non-finite value in column {k}")
        self.rows.append(row)

    def select(self, **where) -> list[dict]:
        return [r for r in self.rows if all(r[k] == v for k, v in where.items())]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.columns)
            for r in self.rows:
                writer.writerow([repr(v) if isinstance(v, float) else v for v in r.values()])


MSE_COLUMNS = ("pairing", "m", "L", "ell", "delta_hat", "mse")
APPROX_COLUMNS = ("m", "L", "E_mean", "E_x1", "E_x2")


def convergence_study(clean_nets: Sequence, system: SingularSystem, X_test, std: float,
                      L_grid: Sequence[float], n_levels: int = 7, seed: int = 0,
                      matched_nets: Mapping[tuple, object] | None = None,
                      k_max: int = 30) -> StudyResult:
    """MSE table over ``(L_m, delta_l)``.

    ``clean_nets[m-1]`` is trained without noise and tested at every level
    (pairing ``clean``). ``matched_nets[(m, l)]``, if given, is trained and
    tested at the same level (pairing ``matched``). Every cell uses its own
    noise stream derived from ``seed`` and ``l`` so both pairings see the
    same test noise.
    """
    if len(clean_nets) != len(L_grid):
        raise DimMismatchError("one clean net per grid value is required")
    rel, abs_levels = noise_levels(std, n_levels)
    result = StudyResult(MSE_COLUMNS, metadata={"seed": seed, "std": std, "k_max": k_max})
    pairings = [("clean", lambda m, ell: clean_nets[m - 1])]
    if matched_nets is not None:
        pairings.append(("matched", lambda m, ell: matched_nets[(m, ell)]))
    for name, pick in pairings:
        for m, L in enumerate(L_grid, start=1):
            for ell in range(n_levels):
                noise = NoiseModel(float(abs_levels[ell]), seed=seed * 1000 + ell)
                mse = mse_reco(pick(m, ell), system, X_test, noise, k_max=k_max)
                result.append(pairing=name, m=m, L=float(L), ell=ell,
                              delta_hat=float(rel[ell]), mse=mse)
    return result


def argmin_L(result: StudyResult, pairing: str = "clean") -> dict[int, int]:
    """Best grid index ``m`` for every noise index ``l``."""
    best: dict[int, tuple] = {}
    for r in result.select(pairing=pairing):
        cur = best.get(r["ell"])
        if cur is None or r["mse"] < cur[1]:
            best[r["ell"]] = (r["m"], r["mse"])
    return {ell: m for ell, (m, _) in sorted(best.items())}


def best_by_increasing_delta(best: Mapping[int, int]) -> list[int]:
    """Argmin indices from :func:`argmin_L` ordered by increasing noise.

    Level 0 is noise free and levels ``l > 0`` shrink as ``3^{-l}``, so the
    order is ``0, l_max, ..., 1``.
    """
    levels = [0] if 0 in best else []
    levels += sorted((ell for ell in best if ell > 0), reverse=True)
    return [best[ell] for ell in levels]


def trend_violations(best_by_level: Sequence[int]) -> int:
    """Number of increases in a sequence that should be non-increasing."""
    b = np.asarray(best_by_level)
    return int(np.sum(np.diff(b) > 0))


def error_split(net: ResidualNet, A_tilde, x_true, y_delta):
    """Both sides of ``||T_L(y) - x|| <= delta/(1-L) + ||phi^{-1}(A x) - x||``.

    ``delta = ||y_delta - A_tilde x||``; the bound needs ``||A_tilde|| <= 1``
    and an exact inverse (``k_max`` large). Returns ``(lhs, rhs)``.
    """
    A = np.asarray(A_tilde, dtype=np.float64)
    x_true = np.asarray(x_true, dtype=np.float64)
    y_delta = np.asarray(y_delta, dtype=np.float64)
    delta = float(np.linalg.norm(y_delta - A @ x_true))
    k_max = 100000
    recon = invert(net, A.T @ y_delta, k_max=k_max, tol=1e-14).x
    clean = invert(net, A.T @ (A @ x_true), k_max=k_max, tol=1e-14).x
    lhs = float(np.linalg.norm(recon - x_true))
    rhs = delta / (1.0 - net.L) + float(np.linalg.norm(clean - x_true))
    return lhs, rhs
