"""Inference as a graph of quanta-planned layer tasks run on harvested energy.

Each parametric layer becomes a task (pooling and standalone activations ride
along with the preceding task).  Ready tasks are picked by a weighted score
of deadline urgency, criticality and whether the first quanta is affordable
now.  When stored energy at a task boundary drops under the escalation
threshold, dropout for the remaining layers is raised (and optionally the
bit width lowered) before the task runs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import ehsim, intermittent
from .devmodel import HardwareProfile, KernelKind
from .dynfit.network import Network, _act, quantize_rows
from .dynfit.policies import clamp, hard_mask
from .errors import ShapeMismatch


@dataclass
class Task:
    """One layer's kernel work.  ``quanta`` holds a plan per kernel stage."""

    id: int
    kind: KernelKind
    layer: int
    deps: tuple[int, ...]
    criticality: float
    deadline_ms: float
    e_est: float
    quanta: list[intermittent.QuantaPlan]

    def first_quanta_energy(self) -> float:
        for plan in self.quanta:
            if plan.quanta:
                return plan.quanta[0].e
        return 0.0

    def quanta_energies(self) -> list[float]:
        return [q.e for plan in self.quanta for q in plan.quanta]


@dataclass
class TaskGraph:
    tasks: list[Task]

    def __post_init__(self):
        ids = {t.id for t in self.tasks}
        for t in self.tasks:
            if any(d not in ids for d in t.deps):
                raise ValueError(f"task {t.id} depends on an unknown task")
        self.topological_order()

    def __len__(self) -> int:
        return len(self.tasks)

    def by_id(self, tid: int) -> Task:
        return next(t for t in self.tasks if t.id == tid)

    def ready(self, done: set[int]) -> list[Task]:
        return [t for t in self.tasks if t.id not in done and all(d in done for d in t.deps)]

    def topological_order(self) -> list[int]:
        done: set[int] = set()
        order = []
        while len(order) < len(self.tasks):
            ready = self.ready(done)
            if not ready:
                raise ValueError("task graph has a cycle")
            for t in sorted(ready, key=lambda t: t.id):
                done.add(t.id)
                order.append(t.id)
        return order


# -------------------------------------------------------------- layer jobs


def _flat_input(x):
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64).reshape(-1, 1))


def layer_jobs(layer, x, kept: np.ndarray, bits=None):
    """Kernel jobs for one parametric layer restricted to the ``kept`` neurons.

    Returns ``(jobs, combine)``; ``combine(outputs)`` builds the layer output
    (bias, activation, dropped neurons left at zero).
    """
    kept = np.asarray(kept, dtype=np.int64)
    Wq = quantize_rows(layer.params["W"], bits)
    b = layer.params["b"]
    kind = layer.kind
    if kind == "dense":
        jobs = [intermittent.GemmJob(np.ascontiguousarray(Wq[kept]), _flat_input(x))] if kept.size else []

        def combine(outs):
            z = np.zeros(layer.neurons)
            if kept.size:
                z[kept] = outs[0][:, 0] + b[kept]
            a = _act(layer.activation, z)
            a[np.setdiff1d(np.arange(layer.neurons), kept)] = 0.0
            return a

        return jobs, combine
    x = np.asarray(x, dtype=np.float64)
    if kind == "conv2d":
        w = Wq.reshape(layer.params["W"].shape)
        jobs = [intermittent.Conv2dJob(x, np.ascontiguousarray(w[kept]))] if kept.size else []
        ho, wo = x.shape[1] - layer.kh + 1, x.shape[2] - layer.kw + 1

        def combine(outs):
            out = np.zeros((layer.neurons, ho, wo))
            if kept.size:
                out[kept] = _act(layer.activation, outs[0] + b[kept][:, None, None])
            return out

        return jobs, combine
    if kind == "dwsconv2d":
        dw = layer.params["dw"]
        jobs = [intermittent.Conv2dJob(x[c], dw[c]) for c in range(layer.c_in)]
        ho, wo = x.shape[1] - layer.kh + 1, x.shape[2] - layer.kw + 1
        n_dw = len(jobs)
        if kept.size:
            # pointwise input is filled in by combine-time chaining below
            jobs.append(_PointwiseJob(np.ascontiguousarray(Wq[kept]), layer.c_in, ho * wo))

        def combine(outs):
            out = np.zeros((layer.neurons, ho, wo))
            if kept.size:
                out[kept] = _act(layer.activation, outs[n_dw].reshape(kept.size, ho, wo) + b[kept][:, None, None])
            return out

        return jobs, combine
    raise ShapeMismatch(f"layer kind {kind!r} has no kernel jobs")


class _PointwiseJob(intermittent.GemmJob):
    """1x1 mix whose right operand comes from the preceding depthwise jobs."""

    def __init__(self, W, c_in, pixels):
        super().__init__(W, np.zeros((c_in, pixels)))

    def bind(self, depthwise_outs):
        self.b = np.ascontiguousarray(np.stack([d.reshape(-1) for d in depthwise_outs]), dtype=np.float64)


def _passive(layer, x):
    return layer.forward(np.asarray(x)[None])[0]


# ---------------------------------------------------------------- planning


def _plans(jobs, profile, budget_uj, naive):
    if naive:
        return [intermittent.plan_for_job(j, profile, budget_uj, l=1, fuse=False) for j in jobs]
    return [intermittent.plan_for_job(j, profile, budget_uj) for j in jobs]


def default_criticality(n_tasks: int) -> list[float]:
    return [(i + 1) / n_tasks for i in range(n_tasks)]


def decompose(
    net: Network,
    profile: HardwareProfile,
    budget_uj: float,
    deadline_ms: float = math.inf,
    criticality=None,
    naive: bool = False,
    masks=None,
    quant=None,
) -> TaskGraph:
    """One task per parametric layer with optimized and fused plans.

    Per-task deadlines split ``deadline_ms`` in proportion to cumulative
    estimated energy.  ``naive`` plans one iteration per quanta, unfused.
    """
    masks = masks or {}
    param = net.parametric()
    crit = list(criticality) if criticality is not None else default_criticality(len(param))
    if len(crit) != len(param):
        raise ValueError("one criticality per parametric layer")
    drafts = []
    for k, i in enumerate(param):
        layer = net.layers[i]
        kept = np.flatnonzero(masks[i]) if i in masks else np.arange(layer.neurons)
        bits = quant.for_layer(i) if quant is not None else None
        jobs, _ = layer_jobs(layer, np.zeros(net.shapes[i]), kept, bits)
        plans = _plans(jobs, profile, budget_uj, naive)
        drafts.append((k, i, layer, plans, sum(p.total_energy for p in plans)))
    total = sum(d[4] for d in drafts) or 1.0
    tasks, cum = [], 0.0
    for k, i, layer, plans, e in drafts:
        cum += e
        deadline = deadline_ms if math.isinf(deadline_ms) else deadline_ms * cum / total
        tasks.append(Task(k, KernelKind(layer.kernel), i, (k - 1,) if k else (), float(crit[k]), deadline, e, plans))
    return TaskGraph(tasks)


def priority(task: Task, now_ms: float, energy_now: float, weights=(1.0, 1.0, 1.0)) -> float:
    w_d, w_c, w_e = weights
    slack = max(task.deadline_ms - now_ms, 1.0)
    feasible = 1.0 if energy_now >= task.first_quanta_energy() else 0.0
    return w_d / slack + w_c * task.criticality + w_e * feasible


def select_task(ready: list[Task], now_ms: float, energy_now: float, weights=(1.0, 1.0, 1.0)) -> Task:
    """Highest score; ties go to the earlier deadline, then the lower id."""
    return min(ready, key=lambda t: (-priority(t, now_ms, energy_now, weights), t.deadline_ms, t.id))


# --------------------------------------------------------------- inference


@dataclass(frozen=True)
class Escalation:
    """Energy-triggered dropout increase.

    Below ``threshold_uj`` (default ``threshold_factor`` x the mean quanta
    energy of the remaining tasks) the level rises by one and the remaining
    layers use ``p * factor**level`` (clamped at ``p_max``).  Level 0 means no
    inference-time dropout.
    """

    enabled: bool = True
    threshold_uj: float | None = None
    threshold_factor: float = 2.0
    factor: float = 1.5
    p_max: float = 0.9
    step_down_q: bool = False


@dataclass
class SLORecord:
    latency_ms: float
    deadline_ms: float
    correct: bool | None

    @property
    def met(self) -> bool:
        return self.latency_ms <= self.deadline_ms

    @property
    def counted_correct(self) -> bool:
        return bool(self.correct) and self.met


@dataclass
class InferenceResult:
    prediction: int
    output: np.ndarray
    record: SLORecord
    log: intermittent.ExecutionLog
    ledger: ehsim.EnergyLedger
    capacitor: ehsim.CapacitorState
    escalations: int
    graph: TaskGraph
    kept: dict = field(default_factory=dict)

    @property
    def restores(self) -> int:
        return self.log.count("restore")

    def report(self) -> dict:
        return {
            "prediction": int(self.prediction),
            "correct": self.record.correct,
            "latency_ms": self.record.latency_ms,
            "deadline_ms": self.record.deadline_ms,
            "counted_correct": self.record.counted_correct,
            "restores": self.restores,
            "escalations": self.escalations,
            "energy_consumed_uJ": self.ledger.debited_nj / 1000.0,
        }

    def report_json(self) -> str:
        return json.dumps(self.report(), sort_keys=True)


def _run_job(job, plan, state, t, trace, profile, ledger, log, task_id, failures, config):
    res = intermittent.run_intermittent(
        job, plan, state, trace, profile, t0=t, failures=failures, config=config, ledger=ledger, log=log, task=task_id
    )
    return res.output, res.capacitor, res.t_end


def _execute_layer(layer, x, kept, bits, runner):
    jobs, combine = layer_jobs(layer, x, kept, bits)
    outs = []
    for job in jobs:
        if isinstance(job, _PointwiseJob):
            job.bind(outs)
        outs.append(runner(job))
    return combine(outs)


def run_inference(
    net: Network,
    x,
    trace: ehsim.EnergyTrace,
    capacitor: ehsim.CapacitorState,
    profile: HardwareProfile,
    slo_ms: float,
    probs: dict | None = None,
    escalation: Escalation | None = None,
    *,
    label: int | None = None,
    quant=None,
    mask_logits: dict | None = None,
    budget_uj: float = 20.0,
    naive: bool = False,
    seed: int = 0,
    index: int = 0,
    t0: float = 0.0,
    arrival: float | None = None,
    weights=(1.0, 1.0, 1.0),
    failures: intermittent.FailureSchedule | None = None,
    config: intermittent.EngineConfig = intermittent.EngineConfig(),
) -> InferenceResult:
    """Run one input through the task graph on harvested energy.

    ``probs`` are the trained per-layer drop probabilities used when
    escalating; ``mask_logits`` (sparse-mask models) fix a hard mask.
    Latency runs from ``arrival`` (default ``t0``) to the last quanta.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != net.input_shape:
        raise ShapeMismatch(f"input shape {x.shape} does not match {net.input_shape}")
    escalation = escalation or Escalation(enabled=False)
    probs = probs or {}
    graph = decompose(net, profile, budget_uj, slo_ms, naive=naive, quant=quant)
    log = intermittent.ExecutionLog()
    ledger = ehsim.EnergyLedger(capacitor.energy_nj)
    state, t = capacitor, t0
    level = 0
    escalations = 0
    done: set[int] = set()
    kept_record = {}
    maskable = set(net.maskable())
    cur_quant = quant
    last_layer = -1
    value = x

    while len(done) < len(graph):
        now_ms = (t - t0) * 1000.0
        usable = ehsim.usable_energy(state)
        task = select_task(graph.ready(done), now_ms, usable, weights)
        remaining = [e for tk in graph.tasks if tk.id not in done for e in tk.quanta_energies()]
        if escalation.enabled and remaining:
            threshold = escalation.threshold_uj
            if threshold is None:
                threshold = escalation.threshold_factor * float(np.mean(remaining))
            if usable < threshold:
                level += 1
                escalations += 1
                log.add(t, "escalation", 0, level, task.id)
                if escalation.step_down_q and cur_quant is not None:
                    cur_quant = cur_quant.step_down()
        log.add(t, "task_start", 0, 0, task.id)

        # passive layers between the previous task and this one
        i = task.layer
        for j in range(last_layer + 1, i):
            value = _passive(net.layers[j], value)
        layer = net.layers[i]
        keep = np.ones(layer.neurons, dtype=bool)
        if mask_logits and i in mask_logits:
            keep &= hard_mask(mask_logits[i]).astype(bool)
        if level and i in maskable:
            base = probs.get(i, np.zeros(layer.neurons))
            p = clamp(np.asarray(base) * escalation.factor**level, escalation.p_max)
            rng = np.random.default_rng([seed, index, task.id, level])
            keep &= rng.random(layer.neurons) < 1.0 - p
        kept = np.flatnonzero(keep)
        kept_record[i] = kept.size
        bits = cur_quant.for_layer(i) if cur_quant is not None else None

        def runner(job):
            nonlocal state, t
            plan = _plans([job], profile, budget_uj, naive)[0]
            out, state, t = _run_job(job, plan, state, t, trace, profile, ledger, log, task.id, failures, config)
            return out

        value = _execute_layer(layer, value, kept, bits, runner)
        last_layer = i
        done.add(task.id)
        log.add(t, "task_end", 0, 0, task.id)

    for j in range(last_layer + 1, len(net.layers)):
        value = _passive(net.layers[j], value)
    ledger.close(state)
    output = np.asarray(value).reshape(-1)
    prediction = int(np.argmax(output))
    latency_ms = (t - (t0 if arrival is None else arrival)) * 1000.0
    correct = None if label is None else bool(prediction == int(label))
    record = SLORecord(latency_ms, slo_ms, correct)
    return InferenceResult(prediction, output, record, log, ledger, state, escalations, graph, kept_record)


def continuous_inference(net: Network, x, quant=None, mask_logits=None) -> np.ndarray:
    """Same kernels, same order, never interrupted: the oracle for ``run_inference``."""
    value = np.asarray(x, dtype=np.float64)
    for i, layer in enumerate(net.layers):
        if not layer.neurons:
            value = _passive(layer, value)
            continue
        keep = np.ones(layer.neurons, dtype=bool)
        if mask_logits and i in mask_logits:
            keep &= hard_mask(mask_logits[i]).astype(bool)
        bits = quant.for_layer(i) if quant is not None else None
        value = _execute_layer(layer, value, np.flatnonzero(keep), bits, intermittent.run_continuous)
    return np.asarray(value).reshape(-1)


def schedule_is_legal(graph: TaskGraph, log: intermittent.ExecutionLog) -> bool:
    """Every ``task_start`` comes after the ``task_end`` of all its deps."""
    ended: set[int] = set()
    for ev in log.events:
        if ev.kind == "task_end":
            ended.add(ev.task)
        elif ev.kind == "task_start":
            if any(d not in ended for d in graph.by_id(ev.task).deps):
                return False
    return True


@dataclass
class StreamResult:
    results: list[InferenceResult]
    ledger: ehsim.EnergyLedger
    capacitor: ehsim.CapacitorState

    def slo_accuracy(self) -> float:
        return sum(r.record.counted_correct for r in self.results) / max(len(self.results), 1)

    def accuracy(self) -> float:
        return sum(bool(r.record.correct) for r in self.results) / max(len(self.results), 1)

    def summary(self) -> dict:
        n = len(self.results)
        return {
            "inferences": n,
            "accuracy": self.accuracy(),
            "slo_accuracy": self.slo_accuracy(),
            "mean_latency_ms": sum(r.record.latency_ms for r in self.results) / max(n, 1),
            "escalations": sum(r.escalations for r in self.results),
            "restores": sum(r.restores for r in self.results),
            "energy_consumed_uJ": self.ledger.debited_nj / 1000.0,
            "ledger_balanced": self.ledger.balanced(),
        }


def run_stream(
    net: Network,
    xs,
    labels,
    trace: ehsim.EnergyTrace,
    capacitor: ehsim.CapacitorState,
    profile: HardwareProfile,
    slo_ms: float,
    probs: dict | None = None,
    escalation: Escalation | None = None,
    *,
    period_s: float = 0.0,
    seed: int = 0,
    **kwargs,
) -> StreamResult:
    """Inputs arrive every ``period_s``; each starts once the previous one is done.

    The capacitor carries over and charges while the device idles.  Latency
    is measured from arrival, so a backlog counts against the SLO.
    """
    ledger = ehsim.EnergyLedger(capacitor.energy_nj)
    state, t = capacitor, 0.0
    results = []
    for k in range(len(xs)):
        arrival = k * period_s
        if arrival > t:
            state = ehsim.charge(state, trace, t, arrival - t, ledger)
            t = arrival
        label = None if labels is None else labels[k]
        res = run_inference(
            net, xs[k], trace, state, profile, slo_ms, probs, escalation,
            label=label, seed=seed, index=k, t0=t, arrival=arrival, **kwargs,
        )
        for name in ("harvested_nj", "spilled_nj", "debited_nj", "lost_nj"):
            setattr(ledger, name, getattr(ledger, name) + getattr(res.ledger, name))
        state = res.capacitor
        t = arrival + res.record.latency_ms / 1000.0
        results.append(res)
    ledger.close(state)
    return StreamResult(results, ledger, state)
