"""Grid search over small CNNs: enumerate, estimate latency on harvested power, filter, rank.

Latency estimate = compute time + expected charging stall, where the stall is
the energy shortfall beyond what the capacitor holds at the start divided by
the trace's mean power.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
import re
from dataclasses import dataclass

import numpy as np

from . import ehsim
from .devmodel import HardwareProfile
from .dynfit.network import Network, build_cnn, loss_and_grad
from .dynfit.training import TrainConfig, train
from .errors import EmptySpace, NoFeasibleCandidate, ParseError, ShapeMismatch

POLICY_TOKENS = {
    "l2": "L2Drop",
    "obd": "OBD_Drop",
    "fmre": "FMRE_Drop",
    "sparse_mask": "SparseDrop",
    "shapley": "ShapleyDrop",
    "taylor": "TaylorDrop",
    "static": "StaticDrop",
    "none": "NoDrop",
}
_TOKEN_POLICY = {v.lower(): k for k, v in POLICY_TOKENS.items()}


@dataclass(frozen=True)
class Candidate:
    convs: tuple[tuple[int, int, int], ...]  # (filters, kh, kw)
    policy: str = "l2"
    pool: str = "avg"

    def descriptor(self, with_policy: bool = False) -> str:
        parts = [f"{f}[{kh}x{kw}]" for f, kh, kw in self.convs] + ["AvgPool"]
        if with_policy:
            parts.append(POLICY_TOKENS[self.policy])
        parts.append("FC")
        return f"{len(self.convs)}xCONV2D:" + ",".join(parts)

    def fits(self, input_shape) -> bool:
        h, w = input_shape[1], input_shape[2]
        for _, kh, kw in self.convs:
            h, w = h - kh + 1, w - kw + 1
        return h >= 1 and w >= 1

    def build(self, input_shape=(1, 12, 12), n_classes: int = 4, seed: int = 0) -> Network:
        if not self.fits(input_shape):
            raise ShapeMismatch(f"{self.descriptor()} does not fit input {input_shape}")
        return build_cnn(input_shape, self.convs, n_classes, pool=None, seed=seed)


_CONV = re.compile(r"^\s*(\d+)\s*\[\s*(\d+)\s*x\s*(\d+)\s*\]\s*$", re.I)


def parse_descriptor(text: str) -> Candidate:
    """Inverse of ``Candidate.descriptor`` (spaces and the policy token optional)."""
    head, sep, body = text.partition(":")
    m = re.match(r"^\s*(\d+)\s*x\s*CONV2D\s*$", head, re.I)
    if not sep or not m:
        raise ParseError(f"not a candidate descriptor: {text!r}")
    convs, policy = [], "l2"
    for tok in body.split(","):
        cm = _CONV.match(tok)
        if cm:
            convs.append(tuple(int(g) for g in cm.groups()))
        elif tok.strip().lower() in ("avgpool", "fc"):
            continue
        elif tok.strip().lower() in _TOKEN_POLICY:
            policy = _TOKEN_POLICY[tok.strip().lower()]
        else:
            raise ParseError(f"unknown descriptor token {tok.strip()!r}")
    if len(convs) != int(m.group(1)):
        raise ParseError(f"descriptor announces {m.group(1)} convs but lists {len(convs)}")
    return Candidate(tuple(convs), policy)


@dataclass(frozen=True)
class SearchSpace:
    """Per-layer choices are independent, so the space is a full product."""

    conv_counts: tuple[int, ...] = (2, 3)
    filters: tuple[int, ...] = (8, 16)
    kernels: tuple[tuple[int, int], ...] = ((3, 3), (5, 3))
    policies: tuple[str, ...] = ("l2",)
    pooling: tuple[str, ...] = ("avg",)
    input_shape: tuple[int, int, int] = (1, 12, 12)
    n_classes: int = 4

    def size(self) -> int:
        per_layer = len(self.filters) * len(self.kernels)
        return sum(per_layer**n for n in self.conv_counts) * len(self.policies) * len(self.pooling)

    def candidates(self) -> list[Candidate]:
        layer_opts = [(f, kh, kw) for f in self.filters for kh, kw in self.kernels]
        out = []
        for n in self.conv_counts:
            for convs in itertools.product(layer_opts, repeat=n):
                for pol in self.policies:
                    for pool in self.pooling:
                        out.append(Candidate(tuple(convs), pol, pool))
        return out


@dataclass
class Estimate:
    candidate: Candidate
    est_latency_ms: float
    energy_uj: float
    feasible: bool
    reason: str = ""
    val_loss: float | None = None
    val_accuracy: float | None = None


def estimate(
    candidate: Candidate,
    profile: HardwareProfile,
    trace: ehsim.EnergyTrace,
    initial_uj: float = 0.0,
    input_shape=(1, 12, 12),
    n_classes: int = 4,
) -> tuple[float, float]:
    """``(latency_ms, energy_uJ)`` for one inference; inf latency if it cannot fit."""
    if not candidate.fits(input_shape):
        return math.inf, math.inf
    net = candidate.build(input_shape, n_classes)
    t_ns = e_nj = 0.0
    for i, macs in net.layer_macs().items():
        kind = net.layers[i].kernel
        t_ns += macs * profile.mac_time(kind)
        e_nj += macs * profile.mac_energy(kind)
    energy = e_nj / 1000.0
    power = trace.mean_power
    shortfall = max(0.0, energy - initial_uj)
    stall_s = 0.0 if shortfall == 0 else (shortfall / power if power > 0 else math.inf)
    return t_ns * 1e-6 + stall_s * 1000.0, energy


def enumerate_and_filter(
    space: SearchSpace,
    profile: HardwareProfile,
    trace: ehsim.EnergyTrace,
    slo_latency_ms: float,
    initial_uj: float = 0.0,
) -> list[Estimate]:
    """Every candidate with its estimate; those over the SLO are kept but flagged infeasible."""
    cands = space.candidates()
    if not cands:
        raise EmptySpace("search space has no candidates")
    out = []
    for c in cands:
        lat, e = estimate(c, profile, trace, initial_uj, space.input_shape, space.n_classes)
        fits = c.fits(space.input_shape)
        ok = fits and lat <= slo_latency_ms
        reason = "" if ok else ("latency over SLO" if fits else "does not fit input")
        out.append(Estimate(c, lat, e, ok, reason))
    return out


@dataclass(frozen=True)
class Decision:
    name: str
    latency_ms: float
    accuracy: float | None
    accepted: bool
    reason: str = ""


def slo_filter(entries, slo_latency_ms: float, min_accuracy: float | None = None) -> list[Decision]:
    """Accept/reject ``(name, latency_ms, accuracy)`` rows.

    A row is rejected if it misses the latency SLO, misses ``min_accuracy``,
    or is dominated (no better on either axis, strictly worse on one) by
    another row that meets the SLO.
    """
    rows = [(n, float(l), None if a is None else float(a)) for n, l, a in entries]
    ok = {n: l <= slo_latency_ms and (min_accuracy is None or a is None or a >= min_accuracy) for n, l, a in rows}
    out = []
    for n, l, a in rows:
        if l > slo_latency_ms:
            out.append(Decision(n, l, a, False, "latency over SLO"))
            continue
        if min_accuracy is not None and a is not None and a < min_accuracy:
            out.append(Decision(n, l, a, False, "accuracy under SLO"))
            continue
        dominated = a is not None and any(
            ok[m] and b is not None and lm <= l and b >= a and (lm < l or b > a) for m, lm, b in rows if m != n
        )
        out.append(Decision(n, l, a, not dominated, "dominated" if dominated else ""))
    return out


def _val_metrics(net: Network, data) -> tuple[float, float]:
    x, y = data
    out = net.forward(x)
    loss = loss_and_grad(out, y, net.loss_kind)[0]
    acc = float(np.mean(out.argmax(axis=1) == y)) if net.loss_kind == "ce" else float("nan")
    return loss, acc


def search(
    estimates: list[Estimate],
    train_budget: int,
    train_data,
    val_data,
    config: TrainConfig | None = None,
    input_shape=(1, 12, 12),
    n_classes: int = 4,
) -> list[Estimate]:
    """Train each feasible candidate ``train_budget`` steps; rank by validation loss.

    Ties are broken by estimated latency and then descriptor, so the ranking
    is a deterministic function of the seed in ``config``.
    """
    feasible = [e for e in estimates if e.feasible]
    if not feasible:
        raise NoFeasibleCandidate("no candidate meets the latency SLO")
    config = config or TrainConfig()
    ranked = []
    for est in feasible:
        cfg = TrainConfig(**{**config.__dict__, "steps": train_budget, "policy": est.candidate.policy})
        net = est.candidate.build(input_shape, n_classes, seed=cfg.seed)
        if train_budget > 0:
            net = train(net, train_data, cfg).net
        est.val_loss, est.val_accuracy = _val_metrics(net, val_data)
        ranked.append(est)
    ranked.sort(key=lambda e: (e.val_loss, e.est_latency_ms, e.candidate.descriptor(True)))
    return ranked


REPORT_FIELDS = ("candidate", "policy", "est_latency_ms", "energy_uJ", "feasible", "val_loss", "val_accuracy")


def report_csv(estimates: list[Estimate]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for e in estimates:
        w.writerow(
            [
                e.candidate.descriptor(),
                e.candidate.policy,
                f"{e.est_latency_ms:.6g}",
                f"{e.energy_uj:.6g}",
                int(e.feasible),
                "" if e.val_loss is None else f"{e.val_loss:.9g}",
                "" if e.val_accuracy is None else f"{e.val_accuracy:.6g}",
            ]
        )
    return buf.getvalue()

