"""Approximation training of diagonal iResNets.

The loss ``mean_i ||phi(x_i) - A x_i - eta_i||^2`` separates over singular
modes, so every mode is an independent 1-D regression
``t -> sigma_j^2 t + eta``. All modes are optimized together: the
parameters of the per-mode subnetworks are stacked along a leading axis and
Adam, being elementwise, keeps the modes decoupled.

Trainable nets implement a small protocol: ``parameters()``,
``mode_residual(C)``, ``mode_gradients(C, upstream)``,
``residual_and_gradients(C, upstream_fn)``, ``after_step()``,
``finalize()`` and ``lipschitz_bound()``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimMismatchError, NonFiniteLossError
from .iresnet_core import DiagonalResidualNet, ResidualNet
from .operator_core import NoiseModel, SingularSystem

__all__ = [
    "AdamState",
    "TrainConfig",
    "TrainResult",
    "TrainSet",
    "adam_step",
    "approx_loss",
    "backprop_subnetwork",
    "make_targets",
    "mode_losses",
    "train_diagonal",
    "write_loss_trace",
]

DIVERGENCE_LIMIT = 1e6


@dataclass(frozen=True)
class TrainConfig:
    L: float
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.5
    decay_every: int | None = None  # default: epochs // 5
    seed: int = 0
    noise_delta: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.L < 1.0:
            raise ValueError(f"L must lie in [0, 1), got {self.L}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.noise_delta < 0:
            raise ValueError("noise_delta must be nonnegative")

    def lr_at(self, epoch: int) -> float:
        every = self.decay_every or max(1, self.epochs // 5)
        return self.lr * self.decay ** (epoch // every)


@dataclass
class TrainSet:
    """Training coefficients ``<x_i, v_j>`` of shape ``(N, n)`` and optional targets."""

    coefficients: np.ndarray
    targets: np.ndarray | None = None

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=np.float64)
        if self.coefficients.ndim != 2 or self.coefficients.shape[0] < 1:
            raise ValueError("coefficients must be a non-empty (N, n) array")
        if not np.all(np.isfinite(self.coefficients)):
            raise ValueError("coefficients must be finite")
        if self.targets is not None:
            self.targets = np.asarray(self.targets, dtype=np.float64)
            if self.targets.shape != self.coefficients.shape:
                raise DimMismatchError("targets and coefficients must have the same shape")
            if not np.all(np.isfinite(self.targets)):
                raise ValueError("targets must be finite")

    @classmethod
    def from_samples(cls, X, system: SingularSystem, noise: NoiseModel | None = None) -> "TrainSet":
        C = system.coefficients(np.asarray(X, dtype=np.float64))
        return cls(C, make_targets(system, C, noise or NoiseModel(0.0)))

    @property
    def n_samples(self) -> int:
        return self.coefficients.shape[0]

    @property
    def n_modes(self) -> int:
        return self.coefficients.shape[1]


def make_targets(system: SingularSystem, coefficients, noise: NoiseModel) -> np.ndarray:
    """``sigma_j^2 c_ij + eta_ij`` with i.i.d. ``eta ~ N(0, delta^2)`` per sample and mode."""
    C = np.asarray(coefficients, dtype=np.float64)
    if C.shape[-1] != system.n:
        raise DimMismatchError(f"coefficients have {C.shape[-1]} modes, system has {system.n}")
    out = system.sigma_sq * C
    if noise.delta > 0:
        out = out + noise.delta * noise.rng().standard_normal(C.shape)
    return out


def approx_loss(net: ResidualNet, X, targets) -> float:
    """``mean_i ||phi(x_i) - target_i||^2`` in signal space."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    T = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if X.shape != T.shape:
        raise DimMismatchError(f"inputs {X.shape} and targets {T.shape} differ")
    R = net.forward(X) - T
    return float(np.mean(np.sum(R * R, axis=1)))


def mode_losses(net: DiagonalResidualNet, C, targets) -> np.ndarray:
    """Per-mode ``mean_i (c_ij - f_j(c_ij) - t_ij)^2``."""
    C = np.asarray(C, dtype=np.float64)
    R = C - net.mode_residual(C) - np.asarray(targets, dtype=np.float64)
    return np.mean(R * R, axis=0)


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        arrays = {f"m{k}": a for k, a in enumerate(self.m)}
        arrays.update({f"v{k}": a for k, a in enumerate(self.v)})
        np.savez(buf, t=np.array(self.t), n=np.array(len(self.m)), **arrays)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "AdamState":
        with np.load(io.BytesIO(data)) as z:
            n = int(z["n"])
            return cls([z[f"m{k}"] for k in range(n)], [z[f"v{k}"] for k in range(n)], int(z["t"]))


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise DimMismatchError("params and grads differ in length")
    if not state.m:
        state = AdamState.zeros_like(params)
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise DimMismatchError(f"parameter {p.shape} and gradient {g.shape} differ")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def backprop_subnetwork(subnet, t, upstream):
    """Gradients of ``sum(upstream * f(t))`` w.r.t. each layer's raw weight and bias.

    ``t`` and ``upstream`` are 1-D for a single subnetwork or ``(n_modes, batch)``
    for a stack. The clip scale is treated as a constant.
    """
    t = np.asarray(t, dtype=np.float64)
    single = t.ndim == 1
    if single:
        t = t[None, :]
        upstream = np.asarray(upstream, dtype=np.float64)[None, :]
    grads = subnet.backprop(t, upstream)
    return grads


@dataclass
class TrainResult:
    net: DiagonalResidualNet
    trace: np.ndarray  # rows (epoch, mode_j, loss); mode -1 is the sum over modes
    lipschitz: np.ndarray
    certified: bool


def train_diagonal(net: DiagonalResidualNet, data: TrainSet, cfg: TrainConfig) -> TrainResult:
    """Fit every mode of ``net`` to its noisy targets by minibatch Adam.

    Each epoch visits every sample once per mode, in a per-mode random order.
    After every optimizer step the power iterations of all layers advance one
    step. On exit the norms are certified and ``lip <= L (1 + 1e-6)^3`` is
    checked. Raises :class:`NonFiniteLossError` if the loss diverges.
    """
    if data.n_modes != net.n:
        raise DimMismatchError(f"training set has {data.n_modes} modes, net has {net.n}")
    targets = data.targets
    if targets is None:
        targets = make_targets(net.basis, data.coefficients, NoiseModel(cfg.noise_delta, cfg.seed))
    C = data.coefficients
    N, n = C.shape
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[1])
    params = net.parameters()
    state = AdamState.zeros_like(params)
    cols = np.arange(n)
    order = np.tile(np.arange(N), (n, 1))
    B = min(cfg.batch_size, N)
    trace = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permuted(order, axis=1)
        epoch_loss = np.zeros(n)
        for start in range(0, N, B):
            idx = order[:, start : start + B].T  # (b, n)
            Cb = C[idx, cols]
            Tb = targets[idx, cols]
            D = Cb - Tb
            b = Cb.shape[0]
            # d/df of mean_b R^2 with R = c - f - t
            F, grads = net.residual_and_gradients(Cb, lambda F: -2.0 * (D - F) / b)
            R = D - F
            epoch_loss += np.sum(R * R, axis=0)
            state = adam_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
            net.after_step()
        epoch_loss /= N
        total = float(epoch_loss.sum())
        if not np.isfinite(total) or total > DIVERGENCE_LIMIT:
            raise NonFiniteLossError(f"loss {total} at epoch {epoch}")
        trace.extend((epoch, j, epoch_loss[j]) for j in range(n))
        trace.append((epoch, -1, total))
    net.finalize()
    lip = np.atleast_1d(net.lipschitz_bound())
    certified = bool(np.all(lip <= net.L * (1 + 1e-6) ** 3))
    return TrainResult(net, np.array(trace, dtype=np.float64).reshape(-1, 3), lip, certified)


def write_loss_trace(path, trace) -> None:
    """CSV with columns ``epoch,mode_j,loss``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "mode_j", "loss"])
        for epoch, mode, loss in np.asarray(trace):
            writer.writerow([int(epoch), int(mode), repr(float(loss))])
