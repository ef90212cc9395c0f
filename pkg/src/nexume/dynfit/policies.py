"""Per-neuron dropout probabilities and mask sampling.

Every formula is available at array level (``*_probs`` helpers taking plain
statistics) and at network level (taking a ``Network`` and a batch).  All of
them clamp into ``[0, p_max]``.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from ..errors import (
    NonFiniteGradient,
    NonFiniteHessian,
    NonFiniteLoss,
    ShapeMismatch,
    TooManyNeuronsForExact,
)


class PolicyKind(str, enum.Enum):
    L2 = "l2"
    OBD = "obd"
    FMRE = "fmre"
    SPARSE_MASK = "sparse_mask"
    SHAPLEY = "shapley"
    TAYLOR = "taylor"
    # baselines, not dynamic
    STATIC = "static"
    NONE = "none"


DYNAMIC_KINDS = tuple(k for k in PolicyKind if k not in (PolicyKind.STATIC, PolicyKind.NONE))


@dataclass(frozen=True)
class DropoutPolicy:
    """Which formula produces p, and its constants.

    ``scale`` is the formula's factor (alpha, beta, gamma, delta or the Taylor
    lambda); for ``static`` it is the fixed drop probability.  ``epsilon=0``
    is accepted so hand-checked ratios come out exact.
    """

    kind: PolicyKind = PolicyKind.L2
    scale: float = 0.1
    epsilon: float = 1e-8
    p_max: float = 0.9
    seed: int = 0
    max_exact: int = 12
    mc_samples: int = 64
    sparsity: float = 1e-3  # sparse_mask: pressure pushing gates towards zero
    refresh_every: int = 1  # recompute p every n steps

    def __post_init__(self):
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        if not (self.epsilon >= 0 and math.isfinite(self.epsilon)):
            raise ValueError("epsilon must be a finite non-negative number")
        if not 0 <= self.p_max < 1:
            raise ValueError("p_max must lie in [0, 1)")
        if self.scale < 0:
            raise ValueError("scale must be non-negative")
        if self.refresh_every < 1:
            raise ValueError("refresh_every must be >= 1")


def clamp(raw, p_max: float) -> np.ndarray:
    return np.clip(np.nan_to_num(np.asarray(raw, dtype=np.float64), nan=0.0, posinf=p_max), 0.0, p_max)


def _ratio(num, den) -> np.ndarray:
    # 0/x -> 0 and x/0 -> inf (then clamped), never NaN
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    num, den = np.broadcast_arrays(num, den)
    out = np.full(num.shape, np.inf)
    zero_num = num == 0
    out[zero_num] = 0.0
    ok = ~zero_num & (den != 0)
    with np.errstate(over="ignore"):
        out[ok] = num[ok] / den[ok]
    return out


# ------------------------------------------------------------ array level


def l2_probs(rows, alpha: float, eps: float, p_max: float) -> np.ndarray:
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    norms = np.sqrt((rows.reshape(rows.shape[0], -1) ** 2).sum(axis=1))
    return clamp(_ratio(np.full(norms.shape, alpha), norms + eps), p_max)


def obd_sensitivity(rows, hess_rows) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    hess_rows = np.asarray(hess_rows, dtype=np.float64)
    if rows.shape != hess_rows.shape:
        raise ShapeMismatch(f"hessian {hess_rows.shape} does not align with weights {rows.shape}")
    if not np.all(np.isfinite(hess_rows)):
        raise NonFiniteHessian("hessian diagonal contains non-finite entries")
    return (hess_rows * rows * rows).reshape(rows.shape[0], -1).sum(axis=1)


def obd_probs(sensitivity, beta: float, eps: float, p_max: float) -> np.ndarray:
    # negative curvature gives no reason to drop, so sensitivities floor at 0
    s = np.maximum(np.asarray(sensitivity, dtype=np.float64), 0.0)
    return clamp(_ratio(beta * s, s.max(initial=0.0) + eps), p_max)


def reconstruction_errors(F, F_hat) -> np.ndarray:
    """``||F_i - F_hat_i||`` per neuron; neurons run along axis 0."""
    F = np.asarray(F, dtype=np.float64)
    F_hat = np.asarray(F_hat, dtype=np.float64)
    if F.shape != F_hat.shape:
        raise ShapeMismatch(f"feature maps {F.shape} and reconstructions {F_hat.shape} differ")
    d = (F - F_hat).reshape(F.shape[0], -1)
    return np.sqrt((d * d).sum(axis=1))


def fmre_probs(re, gamma: float, eps: float, p_max: float) -> np.ndarray:
    re = np.asarray(re, dtype=np.float64)
    return clamp(_ratio(gamma * re, re.max(initial=0.0) + eps), p_max)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sparse_mask_step(z, grad_z, eta: float) -> tuple[np.ndarray, np.ndarray]:
    """One gradient step on mask logits; returns ``(z', sigmoid(z'))``."""
    z = np.asarray(z, dtype=np.float64)
    g = np.asarray(grad_z, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient("mask-logit gradient is not finite")
    z_new = z - eta * g
    return z_new, sigmoid(z_new)


def hard_mask(z) -> np.ndarray:
    return (sigmoid(z) >= 0.5).astype(np.int8)


def sparse_probs(z, p_max: float) -> np.ndarray:
    return clamp(1.0 - sigmoid(z), p_max)


def shapley_weight(n: int, size: int) -> Fraction:
    return Fraction(math.factorial(size) * math.factorial(n - size - 1), math.factorial(n))


def shapley_exact(n: int, value: Callable[[frozenset], float]) -> list[Fraction]:
    """Exact Shapley values of ``value`` over ``n`` players, in rational arithmetic.

    The coalition values are converted exactly, so efficiency
    ``sum(phi) == value(all) - value(empty)`` holds without rounding.
    """
    cache: dict[frozenset, Fraction] = {}

    def v(s):
        if s not in cache:
            val = value(s)
            if not math.isfinite(val):
                raise NonFiniteLoss(f"coalition {sorted(s)} has non-finite value")
            cache[s] = Fraction(val)
        return cache[s]

    players = range(n)
    phi = [Fraction(0)] * n
    for i in players:
        others = [j for j in players if j != i]
        for size in range(n):
            w = shapley_weight(n, size)
            for combo in itertools.combinations(others, size):
                s = frozenset(combo)
                phi[i] += w * (v(s | {i}) - v(s))
    return phi


def shapley_monte_carlo(n: int, value: Callable[[frozenset], float], samples: int, rng) -> np.ndarray:
    """Average marginal contributions over random player orderings."""
    rng = np.random.default_rng(rng)
    phi = np.zeros(n)
    cache: dict[frozenset, float] = {}

    def v(s):
        if s not in cache:
            cache[s] = float(value(s))
        return cache[s]

    for _ in range(samples):
        s: frozenset = frozenset()
        prev = v(s)
        for i in rng.permutation(n):
            s = s | {int(i)}
            cur = v(s)
            phi[i] += cur - prev
            prev = cur
    return phi / max(samples, 1)


def shapley_importance(phi) -> np.ndarray:
    """Loss reduction credited to each neuron: ``max(-phi, 0)``."""
    return np.maximum(-np.asarray(phi, dtype=np.float64), 0.0)


def shapley_probs_from_phi(phi, delta: float, eps: float, p_max: float) -> np.ndarray:
    imp = shapley_importance(phi)
    return clamp(_ratio(np.full(imp.shape, delta), imp + eps), p_max)


def taylor_impact(a, g) -> np.ndarray:
    """``|sum(dL/da * a)|`` per neuron, summed over batch and spatial positions.

    ``a`` and ``g`` are ``(N, n, ...)``.
    """
    a = np.asarray(a, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if a.shape != g.shape:
        raise ShapeMismatch(f"activations {a.shape} and gradients {g.shape} differ")
    if a.ndim == 1:
        return np.abs(a * g)
    axes = (0,) + tuple(range(2, a.ndim))
    return np.abs((a * g).sum(axis=axes))


def taylor_probs_from_impact(impact, lam: float, eps: float, p_max: float) -> np.ndarray:
    impact = np.asarray(impact, dtype=np.float64)
    return clamp(_ratio(np.full(impact.shape, lam), impact + eps), p_max)


# ---------------------------------------------------------- network level


def probs_l2(net, policy: DropoutPolicy) -> dict[int, np.ndarray]:
    return {
        i: l2_probs(net.layers[i].weight_rows(), policy.scale, policy.epsilon, policy.p_max) for i in net.maskable()
    }


def hessian_diag_fn(grad_fn: Callable[[np.ndarray], np.ndarray], w) -> np.ndarray:
    """Central difference of the gradient along each coordinate, ``h = 1e-3 (1 + |w|)``."""
    w = np.array(w, dtype=np.float64)
    flat = w.reshape(-1)
    out = np.empty_like(flat)
    for j in range(flat.size):
        h = 1e-3 * (1.0 + abs(flat[j]))
        orig = flat[j]
        flat[j] = orig + h
        gp = np.asarray(grad_fn(w), dtype=np.float64).reshape(-1)[j]
        flat[j] = orig - h
        gm = np.asarray(grad_fn(w), dtype=np.float64).reshape(-1)[j]
        flat[j] = orig
        out[j] = (gp - gm) / (2 * h)
    return out.reshape(w.shape)


def hessian_diag(net, x, y, layers=None) -> dict[int, np.ndarray]:
    """Diagonal Hessian of the batch loss w.r.t. ``W`` of each listed layer."""
    if len(x) == 0:
        raise ValueError("empty batch")
    layers = net.maskable() if layers is None else layers
    out = {}
    for i in layers:
        W = net.layers[i].params["W"]
        saved = W.copy()

        def grad_fn(w, i=i, W=W):
            W[...] = w
            loss, grads = net.loss_and_grads(x, y)
            if not math.isfinite(loss):
                raise NonFiniteLoss("loss became non-finite while probing curvature")
            return grads[(i, "W")]

        try:
            out[i] = hessian_diag_fn(grad_fn, saved)
        finally:
            W[...] = saved
    return out


def probs_obd(net, hdiag: dict[int, np.ndarray], policy: DropoutPolicy) -> dict[int, np.ndarray]:
    out = {}
    for i in net.maskable():
        rows = net.layers[i].weight_rows()
        s = obd_sensitivity(rows, np.asarray(hdiag[i]).reshape(rows.shape))
        out[i] = obd_probs(s, policy.scale, policy.epsilon, policy.p_max)
    return out


def probs_fmre(F, F_hat, policy: DropoutPolicy) -> np.ndarray:
    """Array form: feature maps and reconstructions with neurons along axis 0."""
    return fmre_probs(reconstruction_errors(F, F_hat), policy.scale, policy.epsilon, policy.p_max)


def lower_bits(bits) -> np.ndarray:
    """One level down the 16/12/8/4 ladder (4 stays 4)."""
    ladder = {16: 12, 12: 8, 8: 4, 4: 4}
    return np.array([ladder[int(b)] for b in np.atleast_1d(bits)], dtype=np.int64)


def net_probs_fmre(net, x, policy: DropoutPolicy, quant=None) -> dict[int, np.ndarray]:
    """Reconstruction = the layer output with each neuron's row one bit level lower."""
    net.forward(x, quant=quant)
    inputs = list(net.inputs)
    out = {}
    for i in net.maskable():
        layer = net.layers[i]
        bits = quant.for_layer(i) if quant is not None else np.full(layer.neurons, 16)
        F = layer.forward(inputs[i], bits=bits)
        F_hat = layer.forward(inputs[i], bits=lower_bits(bits))
        out[i] = probs_fmre(np.moveaxis(F, 1, 0), np.moveaxis(F_hat, 1, 0), policy)
    return out


def probs_taylor(a, g, policy: DropoutPolicy) -> np.ndarray:
    return taylor_probs_from_impact(taylor_impact(a, g), policy.scale, policy.epsilon, policy.p_max)


def net_taylor_impacts(net, x, y, quant=None) -> dict[int, np.ndarray]:
    net.loss_and_grads(x, y, quant=quant)
    return {i: taylor_impact(net.layers[i].last_out, net.layers[i].last_grad_out) for i in net.maskable()}


def net_probs_taylor(net, x, y, policy: DropoutPolicy, quant=None) -> dict[int, np.ndarray]:
    return {
        i: taylor_probs_from_impact(imp, policy.scale, policy.epsilon, policy.p_max)
        for i, imp in net_taylor_impacts(net, x, y, quant).items()
    }


def shapley_values(net, x, y, layer: int, exact: bool | None = None, max_exact: int = 12, samples: int = 64, rng=0):
    """Shapley value of each neuron of ``layer`` for the batch loss (loss as payoff)."""
    n = net.layers[layer].neurons

    def value(s):
        m = np.zeros(n)
        m[list(s)] = 1.0
        return net.loss(x, y, masks={layer: m})

    if exact is None:
        exact = n <= max_exact
    if exact:
        if n > max_exact:
            raise TooManyNeuronsForExact(f"{n} neurons exceeds the exact limit {max_exact}")
        return np.array([float(v) for v in shapley_exact(n, value)])
    return shapley_monte_carlo(n, value, samples, rng)


def shapley_probs(net, x, y, policy: DropoutPolicy, max_exact: int | None = None, exact: bool | None = None):
    """``(phi, p)`` for every maskable layer, as dicts keyed by layer index."""
    max_exact = policy.max_exact if max_exact is None else max_exact
    phis, ps = {}, {}
    for i in net.maskable():
        phi = shapley_values(net, x, y, i, exact, max_exact, policy.mc_samples, [policy.seed, i])
        phis[i] = phi
        ps[i] = shapley_probs_from_phi(phi, policy.scale, policy.epsilon, policy.p_max)
    return phis, ps


def compute_probs(net, x, y, policy: DropoutPolicy, quant=None, z=None) -> dict[int, np.ndarray]:
    """Dispatch to the active policy; ``z`` holds sparse-mask logits per layer."""
    kind = policy.kind
    if kind == PolicyKind.NONE:
        return {i: np.zeros(net.layers[i].neurons) for i in net.maskable()}
    if kind == PolicyKind.STATIC:
        return {i: clamp(np.full(net.layers[i].neurons, policy.scale), policy.p_max) for i in net.maskable()}
    if kind == PolicyKind.L2:
        return probs_l2(net, policy)
    if kind == PolicyKind.OBD:
        return probs_obd(net, hessian_diag(net, x, y), policy)
    if kind == PolicyKind.FMRE:
        return net_probs_fmre(net, x, policy, quant)
    if kind == PolicyKind.SPARSE_MASK:
        z = z or {}
        return {i: sparse_probs(z.get(i, np.zeros(net.layers[i].neurons)), policy.p_max) for i in net.maskable()}
    if kind == PolicyKind.SHAPLEY:
        return shapley_probs(net, x, y, policy)[1]
    if kind == PolicyKind.TAYLOR:
        return net_probs_taylor(net, x, y, policy, quant)
    raise ValueError(f"unhandled policy {kind}")


# ------------------------------------------------------------------ masks


@dataclass(frozen=True)
class MaskSample:
    p: np.ndarray
    m: np.ndarray

    def __post_init__(self):
        if self.p.shape != self.m.shape:
            raise ShapeMismatch("p and m differ in length")


def sample_mask(p, seed) -> MaskSample:
    """Keep neuron i with probability ``1 - p_i``; deterministic in ``seed``."""
    p = np.asarray(p, dtype=np.float64)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    m = (rng.random(p.shape) < 1.0 - p).astype(np.int8)
    return MaskSample(p, m)


def sample_masks(p, seed, draws: int) -> np.ndarray:
    """``draws x n`` independent masks (vectorized ``sample_mask``)."""
    p = np.asarray(p, dtype=np.float64)
    rng = np.random.default_rng(seed)
    return (rng.random((draws,) + p.shape) < 1.0 - p).astype(np.int8)


def keep_rate_bound(p: float, draws: int, sigmas: float = 3.0) -> float:
    return sigmas * math.sqrt(p * (1 - p) / draws)


__all__ = [
    "DropoutPolicy",
    "MaskSample",
    "PolicyKind",
    "compute_probs",
    "hessian_diag",
    "hessian_diag_fn",
    "probs_fmre",
    "probs_l2",
    "probs_obd",
    "probs_taylor",
    "sample_mask",
    "shapley_probs",
    "sparse_mask_step",
]
