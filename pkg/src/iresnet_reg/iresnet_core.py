"""Invertible residual networks ``phi(x) = x - f(x)`` with ``Lip(f) <= L < 1``.

The diagonal architecture acts on coefficients in a singular basis:
``f(x) = sum_j f_j(<x, v_j>) v_j``. All per-mode subnetworks of a diagonal
net are stored stacked along a leading mode axis so that evaluation and
training vectorize over modes; :meth:`MLPDiagonalNet.subnet` hands out a
single mode as a one-element stack.
"""

from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import numpy as np

from .exceptions import BudgetNotContractiveError, DimMismatchError
from .operator_core import SingularSystem, as_operator

__all__ = [
    "DenseResidualNet",
    "DiagonalResidualNet",
    "InversionResult",
    "LipschitzLayer",
    "MLPDiagonalNet",
    "OneParameterNet",
    "ResidualNet",
    "Subnetwork",
    "empirical_lipschitz",
    "extract_filter",
    "forward",
    "invert",
    "reconstruct",
]


def _normalize(x, axis=-1):
    nrm = np.linalg.norm(x, axis=axis, keepdims=True)
    return x / np.where(nrm == 0.0, 1.0, nrm)


class LipschitzLayer:
    """Affine layer whose weight is norm-clipped to a spectral-norm budget.

    ``weight = budget * raw_weight / max(sigma(raw_weight), budget)``, so the
    raw parameter is used unchanged while its norm is within budget. Arrays
    may carry a leading stack axis (one independent layer per mode).
    ``sigma`` holds the current power-iteration estimate of the raw norm.
    """

    def __init__(self, raw_weight, bias, budget: float, u=None, v=None, sigma=None,
                 use_bias: bool = True):
        self.raw_weight = np.array(raw_weight, dtype=np.float64)
        self.bias = np.array(bias, dtype=np.float64)
        self.budget = float(budget)
        self.use_bias = use_bias
        lead = self.raw_weight.shape[:-2]
        out_dim, in_dim = self.raw_weight.shape[-2:]
        self.u = _normalize(np.ones(lead + (out_dim,))) if u is None else np.array(u, dtype=np.float64)
        self.v = _normalize(np.ones(lead + (in_dim,))) if v is None else np.array(v, dtype=np.float64)
        if sigma is None:
            self.sigma = np.zeros(lead)
            self.power_iterate(100, rtol=1e-12)
        else:
            self.sigma = np.array(sigma, dtype=np.float64)

    @classmethod
    def init(cls, in_dim: int, out_dim: int, budget: float, rng: np.random.Generator,
             stack: tuple = (), use_bias: bool = True) -> "LipschitzLayer":
        """Raw weights uniform in +-1/sqrt(fan_in), zero biases."""
        bound = 1.0 / np.sqrt(in_dim)
        raw = rng.uniform(-bound, bound, size=stack + (out_dim, in_dim))
        u = _normalize(rng.standard_normal(stack + (out_dim,)))
        v = _normalize(rng.standard_normal(stack + (in_dim,)))
        return cls(raw, np.zeros(stack + (out_dim,)), budget, u=u, v=v, use_bias=use_bias)

    @property
    def shape(self) -> tuple:
        return self.raw_weight.shape[-2:]

    def power_iterate(self, n_iter: int = 1, rtol: float | None = None) -> np.ndarray:
        """Advance the persistent power iteration; updates and returns ``sigma``."""
        W = self.raw_weight
        for _ in range(n_iter):
            v = _normalize(np.einsum("...oi,...o->...i", W, self.u))
            Wv = np.einsum("...oi,...i->...o", W, v)
            u = _normalize(Wv)
            sigma = np.einsum("...o,...o->...", u, Wv)
            done = rtol is not None and np.all(np.abs(sigma - self.sigma) <= rtol * np.abs(sigma))
            self.u, self.v, self.sigma = u, v, sigma
            if done:
                break
        return self.sigma

    @property
    def scale(self) -> np.ndarray:
        """Clip factor ``budget / max(sigma, budget)`` (1 when inside budget)."""
        if self.budget == 0.0:
            return np.zeros_like(self.sigma)
        return self.budget / np.maximum(self.sigma, self.budget)

    @property
    def weight(self) -> np.ndarray:
        return self.raw_weight * self.scale[..., None, None]

    def certified_norm(self) -> np.ndarray:
        """Exact spectral norm of the effective weight (SVD)."""
        return np.linalg.norm(self.weight, ord=2, axis=(-2, -1))

    def __call__(self, X):
        out = X @ np.swapaxes(self.weight, -1, -2)
        if self.use_bias:
            out = out + self.bias[..., None, :]
        return out

    def copy(self) -> "LipschitzLayer":
        return LipschitzLayer(self.raw_weight.copy(), self.bias.copy(), self.budget,
                              self.u.copy(), self.v.copy(), self.sigma.copy(), self.use_bias)

    def take(self, j: int) -> "LipschitzLayer":
        """Layer of stack entry ``j`` as a one-element stack."""
        sl = slice(j, j + 1)
        return LipschitzLayer(self.raw_weight[sl].copy(), self.bias[sl].copy(), self.budget,
                              self.u[sl].copy(), self.v[sl].copy(), self.sigma[sl].copy(),
                              self.use_bias)


_ACTIVATIONS = (None, "relu", "soft")


class Subnetwork:
    """Scalar-to-scalar MLP ``f_j`` with Lipschitz-clipped layers, stacked over modes.

    Inputs have shape ``(n_modes, batch)``. Hidden layers use ReLU;
    ``output_activation`` may add ReLU or soft thresholding (per-mode
    thresholds ``alpha``) after the last layer.
    """

    def __init__(self, layers: Sequence[LipschitzLayer], output_activation=None, alpha=None):
        if output_activation not in _ACTIVATIONS:
            raise ValueError(f"output_activation must be one of {_ACTIVATIONS}")
        self.layers = list(layers)
        self.output_activation = output_activation
        n = self.n_modes
        self.alpha = np.zeros(n) if alpha is None else np.broadcast_to(
            np.asarray(alpha, dtype=np.float64), (n,)).copy()

    @classmethod
    def init(cls, n_modes: int, widths=(1, 35, 35, 1), budgets=(1.0, 1.0, 0.9),
             rng: np.random.Generator | None = None, use_bias: bool = True,
             output_activation=None, alpha=None) -> "Subnetwork":
        if len(budgets) != len(widths) - 1:
            raise ValueError("need one budget per layer")
        if widths[0] != 1 or widths[-1] != 1:
            raise ValueError("subnetworks map scalars to scalars")
        rng = np.random.default_rng(0) if rng is None else rng
        layers = [
            LipschitzLayer.init(widths[k], widths[k + 1], budgets[k], rng, stack=(n_modes,),
                                use_bias=use_bias)
            for k in range(len(widths) - 1)
        ]
        return cls(layers, output_activation, alpha)

    @property
    def n_modes(self) -> int:
        return self.layers[0].raw_weight.shape[0]

    @property
    def widths(self) -> tuple:
        return (self.layers[0].shape[1],) + tuple(layer.shape[0] for layer in self.layers)

    @property
    def budgets(self) -> tuple:
        return tuple(layer.budget for layer in self.layers)

    @property
    def parameter_count(self) -> int:
        """Trainable parameters of one subnetwork (weights and biases)."""
        count = 0
        for layer in self.layers:
            out_dim, in_dim = layer.shape
            count += out_dim * in_dim + (out_dim if layer.use_bias else 0)
        return count

    def lipschitz_bound(self) -> np.ndarray:
        """Per-mode product of certified layer norms."""
        return np.prod([layer.certified_norm() for layer in self.layers], axis=0)

    def _forward_cache(self, T):
        T = np.asarray(T, dtype=np.float64)
        if T.ndim != 2 or T.shape[0] != self.n_modes:
            raise DimMismatchError(f"expected input of shape ({self.n_modes}, batch), got {T.shape}")
        h = T[..., None]
        cache = [h]
        last = len(self.layers) - 1
        for k, layer in enumerate(self.layers):
            z = layer(h)
            if k < last:
                h = np.maximum(z, 0.0)
            elif self.output_activation == "relu":
                h = np.maximum(z, 0.0)
            elif self.output_activation == "soft":
                a = self.alpha[:, None, None]
                h = np.sign(z) * np.maximum(np.abs(z) - a, 0.0)
            else:
                h = z
            cache.append(z)
            cache.append(h)
        return cache

    def __call__(self, T) -> np.ndarray:
        return self._forward_cache(T)[-1][..., 0]

    forward_cache = _forward_cache

    def backprop(self, T, upstream, cache=None):
        """Gradients of ``sum(upstream * f(T))`` w.r.t. raw weights and biases.

        The clip factor of each layer is held constant (straight-through), so
        ``d/d raw = scale * d/d weight``. Returns ``[(d_raw, d_bias), ...]``
        per layer. ``cache`` may be passed from :meth:`forward_cache`.
        """
        if cache is None:
            cache = self._forward_cache(T)
        g = np.asarray(upstream, dtype=np.float64)[..., None]
        grads = []
        last = len(self.layers) - 1
        for k in range(last, -1, -1):
            layer = self.layers[k]
            h_in, z, h_out = cache[2 * k], cache[2 * k + 1], cache[2 * k + 2]
            if k < last or self.output_activation == "relu":
                g = g * (z > 0.0)
            elif self.output_activation == "soft":
                g = g * (np.abs(z) > self.alpha[:, None, None])
            d_weight = np.swapaxes(g, -1, -2) @ h_in
            d_bias = g.sum(axis=-2) if layer.use_bias else np.zeros_like(layer.bias)
            grads.append((d_weight * layer.scale[..., None, None], d_bias))
            g = g @ layer.weight
        return grads[::-1]

    def power_iterate(self, n_iter: int = 1, rtol: float | None = None):
        for layer in self.layers:
            layer.power_iterate(n_iter, rtol)

    def take(self, j: int) -> "Subnetwork":
        return Subnetwork([layer.take(j) for layer in self.layers], self.output_activation,
                          self.alpha[j : j + 1])

    def copy(self) -> "Subnetwork":
        return Subnetwork([layer.copy() for layer in self.layers], self.output_activation,
                          self.alpha.copy())


class ResidualNet:
    """Base class: subclasses supply ``residual`` (the map ``f``) and ``L``."""

    L: float
    dim: int

    def residual(self, X) -> np.ndarray:
        raise NotImplementedError

    def forward(self, X) -> np.ndarray:
        X = self._check(X)
        return X - self.residual(X)

    __call__ = forward

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.dim:
            raise DimMismatchError(f"expected last axis {self.dim}, got shape {X.shape}")
        return X


class DiagonalResidualNet(ResidualNet):
    """Residual acting mode-wise in the basis of a :class:`SingularSystem`."""

    def __init__(self, basis: SingularSystem, L: float):
        self.basis = basis
        self.L = float(L)

    @property
    def dim(self) -> int:
        return self.basis.dim

    @property
    def n(self) -> int:
        return self.basis.n

    def mode_residual(self, C) -> np.ndarray:
        """``f_j(c_j)`` for coefficients ``C`` of shape ``(..., n)``."""
        raise NotImplementedError

    def residual(self, X):
        X = self._check(X)
        return self.basis.synthesize(self.mode_residual(self.basis.coefficients(X)))

    def scalar_residual(self, j: int, t) -> np.ndarray:
        """``f_j`` evaluated on an array of scalars."""
        t = np.asarray(t, dtype=np.float64)
        C = np.zeros(t.shape + (self.n,))
        C[..., j] = t
        return self.mode_residual(C)[..., j]


class MLPDiagonalNet(DiagonalResidualNet):
    """Diagonal iResNet whose per-mode residuals are stacked :class:`Subnetwork`s.

    The default architecture is ``1 -> 35 -> 35 -> 1`` with layer budgets
    ``(1, 1, L)``; ``widths=(1, 1)`` with budgets ``(L,)`` gives the affine
    per-mode net ``f_j(t) = w_j t + b_j``.
    """

    def __init__(self, basis: SingularSystem, L: float, subnets: Subnetwork):
        super().__init__(basis, L)
        if subnets.n_modes != basis.n:
            raise DimMismatchError(f"{subnets.n_modes} subnetworks for {basis.n} modes")
        self.subnets = subnets

    @classmethod
    def init(cls, basis: SingularSystem, L: float, widths=(1, 35, 35, 1), budgets=None,
             seed: int = 0, use_bias: bool = True, output_activation=None, alpha=None):
        if not 0.0 <= L < 1.0:
            raise BudgetNotContractiveError(f"L must lie in [0, 1), got {L}")
        n_layers = len(widths) - 1
        if budgets is None:
            budgets = (1.0,) * (n_layers - 1) + (L,)
        if np.prod(budgets) > L * (1 + 1e-12):
            raise ValueError(f"budget product {np.prod(budgets)} exceeds L={L}")
        subnets = Subnetwork.init(basis.n, widths, budgets, np.random.default_rng(seed),
                                  use_bias=use_bias, output_activation=output_activation,
                                  alpha=alpha)
        return cls(basis, L, subnets)

    @classmethod
    def affine(cls, basis: SingularSystem, L: float, seed: int = 0):
        return cls.init(basis, L, widths=(1, 1), budgets=(L,), seed=seed)

    def mode_residual(self, C):
        C = np.asarray(C, dtype=np.float64)
        flat = C.reshape(-1, self.n).T
        return self.subnets(flat).T.reshape(C.shape)

    def subnet(self, j: int) -> Subnetwork:
        return self.subnets.take(j)

    # trainable-net protocol used by ``training``
    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.subnets.layers:
            out.append(layer.raw_weight)
            out.append(layer.bias)
        return out

    def mode_gradients(self, C, upstream) -> list[np.ndarray]:
        grads = self.subnets.backprop(np.asarray(C).T, np.asarray(upstream).T)
        return [g for pair in grads for g in pair]

    def residual_and_gradients(self, C, upstream_fn):
        """``f(C)`` and the gradients for upstream ``upstream_fn(f(C))``, sharing one forward pass."""
        T = np.asarray(C, dtype=np.float64).T
        cache = self.subnets.forward_cache(T)
        F = cache[-1][..., 0].T
        U = upstream_fn(F)
        grads = self.subnets.backprop(T, U.T, cache=cache)
        return F, [g for pair in grads for g in pair]

    def after_step(self, n_iter: int = 1, rtol: float | None = None):
        self.subnets.power_iterate(n_iter, rtol)

    def finalize(self):
        """Converge the power iterations (100 steps or rel. change < 1e-12)."""
        self.subnets.power_iterate(100, rtol=1e-12)
        # power iteration under-estimates; if the exact norm still overshoots,
        # fall back to the exact value so the certificate holds
        for layer in self.subnets.layers:
            exact = np.linalg.norm(layer.raw_weight, ord=2, axis=(-2, -1))
            layer.sigma = np.where(exact > layer.sigma * (1 + 1e-12), exact, layer.sigma)

    def lipschitz_bound(self) -> np.ndarray:
        return self.subnets.lipschitz_bound()

    def copy(self) -> "MLPDiagonalNet":
        return MLPDiagonalNet(self.basis, self.L, self.subnets.copy())


class OneParameterNet(DiagonalResidualNet):
    """``f(x) = k (x - A x)`` with ``|k| <= L`` enforced by norm clipping of a raw scalar."""

    def __init__(self, basis: SingularSystem, L: float, raw_k: float = 0.0):
        super().__init__(basis, L)
        self.raw_k = np.array([float(raw_k)])

    @property
    def k(self) -> float:
        r = float(self.raw_k[0])
        if self.L == 0.0:
            return 0.0
        return self.L * r / max(abs(r), self.L)

    def mode_residual(self, C):
        return self.k * (1.0 - self.basis.sigma_sq) * np.asarray(C, dtype=np.float64)

    def parameters(self):
        return [self.raw_k]

    def mode_gradients(self, C, upstream):
        scale = 1.0 if abs(self.raw_k[0]) <= self.L else self.L / abs(self.raw_k[0])
        g = np.sum(np.asarray(upstream) * (1.0 - self.basis.sigma_sq) * np.asarray(C))
        return [np.array([scale * g])]

    def residual_and_gradients(self, C, upstream_fn):
        F = self.mode_residual(C)
        return F, self.mode_gradients(C, upstream_fn(F))

    def after_step(self, n_iter=1, rtol=None):
        pass

    def finalize(self):
        pass

    def lipschitz_bound(self) -> np.ndarray:
        return np.abs(self.k) * np.abs(1.0 - self.basis.sigma_sq)

    def copy(self):
        return OneParameterNet(self.basis, self.L, float(self.raw_k[0]))


class DenseResidualNet(ResidualNet):
    """Fully connected residual ``f = W_m relu(... relu(W_1 x + b_1) ...) + b_m``.

    Layer budgets must multiply to at most ``L``.
    """

    def __init__(self, layers: Sequence[LipschitzLayer], L: float):
        self.layers = list(layers)
        self.L = float(L)
        if np.prod([layer.budget for layer in self.layers]) > self.L * (1 + 1e-12):
            raise ValueError("layer budgets multiply to more than L")

    @classmethod
    def init(cls, dim: int, hidden=(64,), L: float = 0.9, seed: int = 0):
        rng = np.random.default_rng(seed)
        widths = (dim,) + tuple(hidden) + (dim,)
        budgets = (1.0,) * (len(widths) - 2) + (L,)
        layers = [LipschitzLayer.init(widths[k], widths[k + 1], budgets[k], rng)
                  for k in range(len(widths) - 1)]
        return cls(layers, L)

    @property
    def dim(self) -> int:
        return self.layers[0].shape[1]

    def residual(self, X):
        X = self._check(X)
        h = np.atleast_2d(X)
        for k, layer in enumerate(self.layers):
            h = layer(h)
            if k < len(self.layers) - 1:
                h = np.maximum(h, 0.0)
        return h.reshape(X.shape)

    def lipschitz_bound(self) -> float:
        return float(np.prod([layer.certified_norm() for layer in self.layers]))


def forward(net: ResidualNet, x) -> np.ndarray:
    """``phi(x) = x - f(x)``."""
    return net.forward(x)


class InversionResult(NamedTuple):
    x: np.ndarray
    iters: int
    residual: float
    step_norms: np.ndarray  # per iteration, maximum over the batch
    sample_step_norms: np.ndarray  # (iters, batch)


def invert(net: ResidualNet, z, k_max: int = 30, tol: float = 1e-10) -> InversionResult:
    """Solve ``phi(x) = z`` by the fixed-point iteration ``x <- f(x) + z`` from ``x = z``.

    Stops after ``k_max`` iterations or once the largest step norm falls
    below ``tol * (1 - L)``. ``z`` may be a batch ``(N, d)``; ``step_norms``
    and the residual are maxima over the batch, ``sample_step_norms`` keeps
    every sample.
    """
    if not net.L < 1.0:
        raise BudgetNotContractiveError(f"fixed-point inversion needs L < 1, got {net.L}")
    z = net._check(z)
    x = z.copy()
    steps = []
    stop = tol * (1.0 - net.L)
    iters = 0
    for iters in range(1, k_max + 1):
        x_new = net.residual(x) + z
        norms = np.linalg.norm(np.atleast_2d(x_new - x), axis=-1)
        step = float(np.max(norms))
        steps.append(norms)
        x = x_new
        if step < stop:
            break
    res = float(np.max(np.linalg.norm(np.atleast_2d(net.forward(x) - z), axis=-1)))
    per_sample = np.array(steps).reshape(iters, -1)
    return InversionResult(x, iters, res, per_sample.max(axis=1), per_sample)


def reconstruct(net: ResidualNet, A_tilde, y, k_max: int = 30, tol: float = 1e-10) -> np.ndarray:
    """``T_L(y) = phi^{-1}(A_tilde^T y)``."""
    A = as_operator(A_tilde, "A_tilde")
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != A.shape[0]:
        raise DimMismatchError(f"data has last axis {y.shape[-1]}, operator has {A.shape[0]} rows")
    return invert(net, y @ A, k_max=k_max, tol=tol).x


def _scalar_inverse(f_j: Callable, s, L: float, k_max: int, tol: float):
    s = np.asarray(s, dtype=np.float64)
    t = s.copy()
    stop = tol * (1.0 - L)
    for _ in range(k_max):
        t_new = f_j(t) + s
        done = np.max(np.abs(t_new - t), initial=0.0) < stop
        t = t_new
        if done:
            break
    return t


def extract_filter(net: DiagonalResidualNet, j: int, s, k_max: int = 30, tol: float = 1e-12):
    """Learned filter value and bias of mode ``j``.

    ``bias_j = (Id - f_j)^{-1}(0)`` and
    ``r = ((Id - f_j)^{-1}(s) - bias_j) / s``; at ``s = 0`` the value 1 is
    returned by convention. ``s`` may be an array.
    """
    if not net.L < 1.0:
        raise BudgetNotContractiveError(f"need L < 1, got {net.L}")
    if not 0 <= j < net.n:
        raise IndexError(f"mode {j} out of range for {net.n} modes")
    f_j = lambda t: net.scalar_residual(j, t)  # noqa: E731
    bias = float(_scalar_inverse(f_j, np.zeros(1), net.L, k_max, tol)[0])
    s = np.asarray(s, dtype=np.float64)
    t = _scalar_inverse(f_j, np.atleast_1d(s), net.L, k_max, tol)
    s1 = np.atleast_1d(s)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(s1 == 0.0, 1.0, (t - bias) / np.where(s1 == 0.0, 1.0, s1))
    r = r.reshape(s.shape)
    return (float(r) if r.ndim == 0 else r), bias


def empirical_lipschitz(f: Callable, dim: int = 1, n_pairs: int = 1000,
                        rng: np.random.Generator | None = None, scale: float = 1.0) -> float:
    """Largest observed ``|f(x1) - f(x2)| / |x1 - x2|`` over random pairs.

    Half the pairs are independent draws, half are small perturbations of a
    draw (to probe local slopes). This is a lower bound on ``Lip(f)``.
    ``f`` is called on arrays of shape ``(n_pairs, dim)``.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    x1 = scale * rng.standard_normal((n_pairs, dim))
    far = scale * rng.standard_normal((n_pairs, dim))
    near = x1 + 1e-3 * scale * rng.standard_normal((n_pairs, dim))
    x2 = np.where((np.arange(n_pairs) % 2 == 0)[:, None], far, near)
    f1 = np.asarray(f(x1), dtype=np.float64).reshape(n_pairs, -1)
    f2 = np.asarray(f(x2), dtype=np.float64).reshape(n_pairs, -1)
    num = np.linalg.norm(f1 - f2, axis=1)
    den = np.linalg.norm(x1 - x2, axis=1)
    ok = den > 0
    return float(np.max(num[ok] / den[ok], initial=0.0))
