"""Masked, quantization-aware SGD plus update-ratio bookkeeping and fine-tuning."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import intermittent
from ..devmodel import HardwareProfile
from ..errors import InvalidBitWidth, NonFiniteGradient, NonFiniteLoss, ZeroIterations
from ..kernels.fixed import BIT_WIDTHS
from .network import Network, loss_and_grad
from .policies import (
    DropoutPolicy,
    PolicyKind,
    compute_probs,
    lower_bits,
    sample_mask,
    sigmoid,
    sparse_mask_step,
)


@dataclass
class QuantAssignment:
    """Per-neuron bit widths ``q`` and cost weights ``c`` with penalty weight ``lam``.

    ``layout`` maps a layer index to its ``(start, stop)`` slice of ``q``;
    without it the assignment is a bare vector (usable for the penalty only).
    """

    q: np.ndarray
    c: np.ndarray | float = 1.0
    lam: float = 0.01
    layout: dict[int, tuple[int, int]] | None = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.int64).reshape(-1)
        self.c = np.broadcast_to(np.asarray(self.c, dtype=np.float64), self.q.shape).copy()
        bad = sorted(set(int(b) for b in self.q) - set(BIT_WIDTHS))
        if bad:
            raise InvalidBitWidth(f"bit widths {bad} not in {BIT_WIDTHS}")
        if np.any(self.c < 0):
            raise ValueError("cost weights must be non-negative")
        if not self.lam >= 0:
            raise ValueError("lambda must be non-negative")

    @classmethod
    def uniform(cls, net: Network, bits: int = 16, lam: float = 0.01, c: float = 1.0) -> "QuantAssignment":
        layout, pos = {}, 0
        for i, n in net.neuron_counts().items():
            layout[i] = (pos, pos + n)
            pos += n
        return cls(np.full(pos, bits), c, lam, layout)

    def for_layer(self, i: int):
        if self.layout is None or i not in self.layout:
            return None
        a, b = self.layout[i]
        return self.q[a:b]

    def penalty(self) -> float:
        return self.lam * float((self.c * self.q).sum())

    def copy(self) -> "QuantAssignment":
        return QuantAssignment(self.q.copy(), self.c.copy(), self.lam, dict(self.layout) if self.layout else None)

    def step_down(self, layers=None) -> "QuantAssignment":
        """A copy with the listed layers (default all) one level lower on the ladder."""
        out = self.copy()
        if out.layout is None:
            out.q = lower_bits(out.q)
            return out
        for i in layers if layers is not None else out.layout:
            a, b = out.layout[i]
            out.q[a:b] = lower_bits(out.q[a:b])
        return out

    def to_dict(self) -> dict:
        return {
            "q": self.q.tolist(),
            "c": self.c.tolist(),
            "lambda": self.lam,
            "layout": {str(k): list(v) for k, v in (self.layout or {}).items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantAssignment":
        layout = {int(k): tuple(v) for k, v in d.get("layout", {}).items()} or None
        return cls(d["q"], d.get("c", 1.0), d.get("lambda", 0.01), layout)


def quant_penalty_loss(base_loss: float, quant: QuantAssignment) -> float:
    """``L + lam * sum(c_i * q_i)`` with q in bits."""
    return float(base_loss) + quant.penalty()


# ---------------------------------------------------------- update ratios


@dataclass
class UpdateTracker:
    U: dict[tuple[int, str], np.ndarray]
    T: int = 0
    theta: float = 0.5
    last_finetune_epochs: int = 0

    def __post_init__(self):
        if not 0 <= self.theta <= 1:
            raise ValueError("theta must lie in [0, 1]")

    @classmethod
    def for_network(cls, net: Network, theta: float = 0.5) -> "UpdateTracker":
        return cls({(i, n): np.zeros(a.shape, dtype=np.int64) for i, n, a in net.param_items()}, 0, theta)

    def record(self, before: dict, net: Network) -> None:
        """Count one iteration; bump U only where a weight actually changed."""
        self.T += 1
        for i, name, arr in net.param_items():
            self.U[(i, name)] += arr != before[(i, name)]


def update_ratio(tracker: UpdateTracker) -> dict[tuple[int, str], np.ndarray]:
    if tracker.T < 1:
        raise ZeroIterations("no training iterations recorded")
    return {k: u / tracker.T for k, u in tracker.U.items()}


def select_undertrained(tracker: UpdateTracker) -> dict[tuple[int, str], np.ndarray]:
    """Boolean selection per parameter tensor: ``ratio < theta``."""
    return {k: r < tracker.theta for k, r in update_ratio(tracker).items()}


# ---------------------------------------------------------------- energy


@dataclass(frozen=True)
class EnergyContext:
    """Device and per-quanta budget (uJ) used to re-plan layer loops each step."""

    profile: HardwareProfile
    budget_uj: float
    fuse: bool = True


def layer_plans(net: Network, ctx: EnergyContext, masks=None) -> dict[int, intermittent.QuantaPlan]:
    """Quanta plan for every parametric layer's output loop, skipping dropped neurons."""
    masks = masks or {}
    plans = {}
    for i in net.parametric():
        layer = net.layers[i]
        out_shape = net.shapes[i + 1]
        spatial = int(np.prod(out_shape[1:])) if len(out_shape) > 1 else 1
        kept = int(np.count_nonzero(masks[i])) if i in masks else layer.neurons
        macs_per_iter = layer.macs(net.shapes[i]) / (layer.neurons * spatial)
        e_iter = macs_per_iter * ctx.profile.mac_energy(layer.kernel) / 1000.0
        e_ckpt = ctx.profile.e_checkpoint / 1000.0
        extent = kept * spatial
        inner = out_shape[-1] if len(out_shape) > 1 else 1
        if extent == 0:
            plans[i] = intermittent.plan_from_sizes([], e_iter, e_ckpt, ctx.budget_uj, layer.kernel, inner)
            continue
        plan = intermittent.plan_loop(extent, e_iter, e_ckpt, ctx.budget_uj, layer.kernel, inner)
        plans[i] = intermittent.fuse_tasks(plan) if ctx.fuse else plan
    return plans


# -------------------------------------------------------------- training


def _check_finite_loss(loss: float) -> None:
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss}")


def optimize_bits(net: Network, x, y, quant: QuantAssignment) -> QuantAssignment:
    """Greedy per-neuron bit reduction: lower q_i while the penalized loss drops."""
    quant = quant.copy()
    base = net.loss(x, y, quant=quant)
    for i in net.parametric():
        a, _ = quant.layout[i]
        for j in range(net.layers[i].neurons):
            k = a + j
            old = int(quant.q[k])
            if old == BIT_WIDTHS[-1]:
                continue
            new = int(lower_bits([old])[0])
            quant.q[k] = new
            trial = net.loss(x, y, quant=quant)
            if trial + quant.lam * quant.c[k] * new < base + quant.lam * quant.c[k] * old:
                base = trial
            else:
                quant.q[k] = old
    return quant


def train_step(
    net: Network,
    batch,
    policy: DropoutPolicy,
    quant: QuantAssignment | None = None,
    energy_context: EnergyContext | None = None,
    tracker: UpdateTracker | None = None,
    *,
    lr: float = 0.01,
    step: int = 0,
    probs: dict | None = None,
    masks: dict | None = None,
    z: dict | None = None,
):
    """One masked SGD step; returns ``(net, tracker, metrics)``.

    ``probs`` skips recomputing the policy; ``masks`` overrides sampling.
    For ``sparse_mask`` the soft gates ``sigmoid(z)`` scale activations and
    ``z`` (updated in place) learns alongside the weights.
    """
    x, y = batch
    tracker = tracker if tracker is not None else UpdateTracker.for_network(net)
    sparse = policy.kind == PolicyKind.SPARSE_MASK
    if sparse and z is None:
        raise ValueError("sparse_mask training needs mask logits z")
    if probs is None:
        probs = compute_probs(net, x, y, policy, quant, z)
    if masks is None:
        rng = np.random.default_rng([policy.seed, step])
        if sparse:
            masks = {i: np.ones(net.layers[i].neurons, dtype=np.int8) for i in net.maskable()}
        else:
            masks = {i: sample_mask(probs[i], rng).m for i in net.maskable()}
    gates = {i: sigmoid(z[i]) for i in net.maskable()} if sparse else None

    before = {(i, n): a.copy() for i, n, a in net.param_items()}
    out = net.forward(x, masks, quant, gates)
    loss, dy = loss_and_grad(out, y, net.loss_kind)
    _check_finite_loss(loss)
    grads = net.backward(dy)
    for (i, name), g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"gradient of layer {i} {name} is not finite")
        layer = net.layers[i]
        if i in masks and name not in layer.unmasked_params:
            keep = np.asarray(masks[i]).astype(bool)
            layer.params[name][keep] -= lr * g[keep]
        else:
            layer.params[name] -= lr * g
    if sparse:
        for i in net.maskable():
            s = sigmoid(z[i])
            grad_z = (net.layers[i].gate_grad + policy.sparsity / s.size) * s * (1 - s)
            z[i], _ = sparse_mask_step(z[i], grad_z, lr)
    tracker.record(before, net)

    metrics = {
        "loss": loss,
        "loss_prime": quant_penalty_loss(loss, quant) if quant is not None else loss,
        "masks": masks,
        "kept": {i: int(np.count_nonzero(m)) for i, m in masks.items()},
        "p_mean": {i: float(np.mean(p)) if len(p) else 0.0 for i, p in probs.items()},
    }
    if energy_context is not None:
        plans = layer_plans(net, energy_context, masks)
        metrics["quanta"] = {i: p.sizes() for i, p in plans.items()}
        metrics["energy_uj"] = sum(p.total_energy for p in plans.values())
    return net, tracker, metrics


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for a in range(0, n, batch_size):
        yield order[a : a + batch_size]


def finetune(
    net: Network,
    tracker: UpdateTracker,
    data,
    max_epochs: int,
    *,
    lr: float = 0.01,
    batch_size: int = 32,
    seed: int = 0,
) -> Network:
    """Train only the under-trained weights (ratio < theta), everything else frozen.

    Masks and quantization are off.  Each fine-tune update that changes a
    selected weight is credited to its counter (capped at T) and the weight
    freezes once its ratio reaches theta; stops when none remain or after
    ``max_epochs``.  Epochs run are stored on ``tracker.last_finetune_epochs``.
    """
    x, y = data
    active = select_undertrained(tracker)
    need = math.ceil(tracker.theta * tracker.T - 1e-12)
    tracker.last_finetune_epochs = 0
    rng = np.random.default_rng([seed, 7])
    for epoch in range(max_epochs):
        if not any(a.any() for a in active.values()):
            break
        tracker.last_finetune_epochs = epoch + 1
        for idx in _batches(len(x), batch_size, rng):
            loss, grads = net.loss_and_grads(x[idx], y[idx])
            _check_finite_loss(loss)
            for key, g in grads.items():
                sel = active[key]
                if not sel.any():
                    continue
                W = net.layers[key[0]].params[key[1]]
                old = W[sel]
                W[sel] = old - lr * g[sel]
                changed = np.zeros(W.shape, dtype=bool)
                changed[sel] = W[sel] != old
                U = tracker.U[key]
                U[changed] = np.minimum(U[changed] + 1, tracker.T)
                active[key] = sel & (U < need)
            if not any(a.any() for a in active.values()):
                break
    return net


# ---------------------------------------------------------------- driver


@dataclass
class TrainConfig:
    """Every training knob, addressable by key in the JSON config."""

    steps: int = 500
    batch_size: int = 32
    lr: float = 0.01
    seed: int = 0
    loss: str = "ce"
    policy: str = "l2"
    alpha: float = 0.1
    beta: float = 0.1
    gamma: float = 0.1
    delta: float = 0.1
    lambda_taylor: float = 0.1
    static_p: float = 0.1
    epsilon: float = 1e-8
    p_max: float = 0.9
    refresh_every: int = 10
    max_exact: int = 12
    mc_samples: int = 64
    sparsity: float = 1e-3
    bits: int = 16
    quant_lambda: float = 0.01
    quant_cost: float = 1.0
    quant_every: int = 0  # 0 disables per-neuron bit search
    theta: float = 0.5
    finetune_epochs: int = 0
    device: str | None = None
    budget_uj: float | None = None

    def policy_obj(self) -> DropoutPolicy:
        kind = PolicyKind(self.policy)
        scale = {
            PolicyKind.L2: self.alpha,
            PolicyKind.OBD: self.beta,
            PolicyKind.FMRE: self.gamma,
            PolicyKind.SHAPLEY: self.delta,
            PolicyKind.TAYLOR: self.lambda_taylor,
            PolicyKind.STATIC: self.static_p,
        }.get(kind, 0.0)
        return DropoutPolicy(
            kind,
            scale,
            self.epsilon,
            self.p_max,
            self.seed,
            self.max_exact,
            self.mc_samples,
            self.sparsity,
            self.refresh_every,
        )


@dataclass
class TrainResult:
    net: Network
    tracker: UpdateTracker
    quant: QuantAssignment
    policy: DropoutPolicy
    z: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    probs: dict = field(default_factory=dict)


def train(net: Network, data, config: TrainConfig, energy_context: EnergyContext | None = None) -> TrainResult:
    """Run ``config.steps`` masked steps, then optional fine-tuning."""
    x, y = data
    policy = config.policy_obj()
    quant = QuantAssignment.uniform(net, config.bits, config.quant_lambda, config.quant_cost)
    tracker = UpdateTracker.for_network(net, config.theta)
    z = {i: np.full(net.layers[i].neurons, 2.0) for i in net.maskable()} if policy.kind == PolicyKind.SPARSE_MASK else None
    rng = np.random.default_rng([config.seed, 1])
    history = []
    probs = None
    batches = iter(())
    for step in range(config.steps):
        idx = next(batches, None)
        if idx is None:
            batches = _batches(len(x), config.batch_size, rng)
            idx = next(batches)
        xb, yb = x[idx], y[idx]
        if probs is None or step % policy.refresh_every == 0:
            probs = compute_probs(net, xb, yb, policy, quant, z)
        net, tracker, metrics = train_step(
            net, (xb, yb), policy, quant, energy_context, tracker, lr=config.lr, step=step, probs=probs, z=z
        )
        history.append(metrics["loss"])
        if config.quant_every and (step + 1) % config.quant_every == 0:
            quant = optimize_bits(net, xb, yb, quant)
    if config.finetune_epochs and tracker.T:
        finetune(net, tracker, data, config.finetune_epochs, lr=config.lr, batch_size=config.batch_size, seed=config.seed)
    final_probs = compute_probs(net, x[: config.batch_size], y[: config.batch_size], policy, quant, z)
    return TrainResult(net, tracker, quant, policy, z or {}, history, final_probs)
