"""Checkpointed loop execution under harvested power.

A kernel's output elements form a flat iteration space.  A ``QuantaPlan``
tiles that space into uninterruptible quanta, each sized so that its compute
energy plus one checkpoint fits the per-quanta budget.  ``run_intermittent``
replays the plan against a capacitor and an energy trace: it waits when the
store cannot pay for the next quanta, commits a checksummed snapshot after
every quanta, and after a power loss reloads the last snapshot and resumes.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import ehsim
from .devmodel import HardwareProfile, KernelKind
from .errors import CorruptSnapshot, InfeasibleBudget, ShapeMismatch, Starvation, VersionMismatch
from .kernels import _backend
from .kernels.fixed import (
    FixedTensor,
    QFormat,
    check_accumulator,
    output_multiplier,
    product_format,
)

# ---------------------------------------------------------------- planning


def optimize_quanta(extent: int, e_iter: float, e_ckpt: float, budget: float) -> int:
    """Largest iteration count whose energy plus one checkpoint fits ``budget``.

    Fewer, longer quanta mean fewer checkpoints, so this ``l`` also minimises
    the total energy of the loop.  Capped at ``extent``.
    """
    if extent < 1:
        raise ValueError("extent must be at least 1")
    if not (e_iter > 0 and e_ckpt > 0):
        raise ValueError("per-iteration and checkpoint energies must be positive")
    if e_iter + e_ckpt > budget:
        raise InfeasibleBudget(
            f"one iteration ({e_iter} uJ) plus checkpoint ({e_ckpt} uJ) exceeds budget {budget} uJ"
        )
    l = max(1, min(extent, int((budget - e_ckpt) // e_iter)))
    # the float guess can be off by one at exact boundaries
    while l < extent and (l + 1) * e_iter + e_ckpt <= budget:
        l += 1
    while l > 1 and l * e_iter + e_ckpt > budget:
        l -= 1
    return l


@dataclass(frozen=True)
class Quanta:
    kernel: KernelKind
    start: int
    l: int
    e: float  # uJ, compute plus checkpoint
    loop_cursor: tuple[int, int] = (0, 0)

    @property
    def stop(self) -> int:
        return self.start + self.l


@dataclass(frozen=True)
class QuantaPlan:
    quanta: tuple[Quanta, ...]
    budget: float
    extent: int
    e_iter: float
    e_ckpt: float
    inner: int = 1

    def __len__(self) -> int:
        return len(self.quanta)

    def __iter__(self) -> Iterator[Quanta]:
        return iter(self.quanta)

    @property
    def total_energy(self) -> float:
        return sum(q.e for q in self.quanta)

    @property
    def checkpoints(self) -> int:
        return len(self.quanta)

    def covered(self) -> list[int]:
        return [i for q in self.quanta for i in range(q.start, q.stop)]

    def tiles_exactly(self) -> bool:
        pos = 0
        for q in self.quanta:
            if q.start != pos or q.l < 1:
                return False
            pos = q.stop
        return pos == self.extent

    def sizes(self) -> list[int]:
        return [q.l for q in self.quanta]


def _quanta(kind, start, l, e_iter, e_ckpt, inner):
    return Quanta(KernelKind(kind), start, l, l * e_iter + e_ckpt, divmod(start, inner))


def plan_from_sizes(
    sizes, e_iter: float, e_ckpt: float, budget: float, kind=KernelKind.GEMM, inner: int = 1
) -> QuantaPlan:
    quanta, pos = [], 0
    for l in sizes:
        if l < 1:
            raise ValueError("quanta sizes must be positive")
        quanta.append(_quanta(kind, pos, int(l), e_iter, e_ckpt, inner))
        pos += int(l)
    return QuantaPlan(tuple(quanta), budget, pos, e_iter, e_ckpt, inner)


def plan_loop(
    extent: int,
    e_iter: float,
    e_ckpt: float,
    budget: float,
    kind=KernelKind.GEMM,
    inner: int = 1,
    l: int | None = None,
) -> QuantaPlan:
    """Tile ``extent`` iterations into quanta of ``l`` (default: optimal) iterations."""
    if l is None:
        l = optimize_quanta(extent, e_iter, e_ckpt, budget)
    full, rest = divmod(extent, l)
    return plan_from_sizes([l] * full + ([rest] if rest else []), e_iter, e_ckpt, budget, kind, inner)


def _split(l: int, e_iter: float, e_ckpt: float, budget: float) -> list[int]:
    best = optimize_quanta(l, e_iter, e_ckpt, budget)
    full, rest = divmod(l, best)
    return [best] * full + ([rest] if rest else [])


def split_over_budget(plan: QuantaPlan) -> QuantaPlan:
    """Re-split only the quanta whose energy exceeds the plan budget; the rest are kept."""
    if all(q.e <= plan.budget for q in plan.quanta):
        return plan
    sizes = []
    for q in plan.quanta:
        sizes.extend(_split(q.l, plan.e_iter, plan.e_ckpt, plan.budget) if q.e > plan.budget else [q.l])
    return plan_from_sizes(sizes, plan.e_iter, plan.e_ckpt, plan.budget, plan.quanta[0].kernel, plan.inner)


def fuse_tasks(plan: QuantaPlan, budget: float | None = None) -> QuantaPlan:
    """Greedily merge neighbouring quanta under a single checkpoint.

    A run of quanta is merged while its summed iteration energy plus one
    checkpoint stays within ``budget``.  A quanta that is already over budget
    is re-split at the optimal size instead.
    """
    if budget is None:
        budget = plan.budget
    sizes: list[int] = []
    for q in plan.quanta:
        if q.l * plan.e_iter + plan.e_ckpt > budget:
            pieces = _split(q.l, plan.e_iter, plan.e_ckpt, budget)
        else:
            pieces = [q.l]
        for l in pieces:
            if sizes and (sizes[-1] + l) * plan.e_iter + plan.e_ckpt <= budget:
                sizes[-1] += l
            else:
                sizes.append(l)
    kind = plan.quanta[0].kernel if plan.quanta else KernelKind.GEMM
    return plan_from_sizes(sizes, plan.e_iter, plan.e_ckpt, budget, kind, plan.inner)


# ------------------------------------------------------------------- jobs


class GemmJob:
    """``C = A @ B`` with one iteration per output element."""

    kind = KernelKind.GEMM

    def __init__(self, A, B, out_format: QFormat | None = None, *, backend=None):
        self.impl = backend or _backend.impl
        self.fixed = isinstance(A, FixedTensor)
        if self.fixed:
            if not isinstance(B, FixedTensor):
                raise TypeError("both operands must be FixedTensor on the fixed path")
            a, b = A.codes, B.codes
            self.out_format = out_format or product_format(A.qformat, B.qformat, a.shape[1])
            self.requant = output_multiplier(A.qformat, B.qformat, self.out_format) + (
                -self.out_format.qmax,
                self.out_format.qmax,
            )
            self.integer = True
        else:
            a, b = np.asarray(A), np.asarray(B)
            self.integer = np.issubdtype(a.dtype, np.integer) and np.issubdtype(b.dtype, np.integer)
            self.out_format = None
            self.requant = (0, 0, 0, 0)
        dtype = np.int64 if self.integer else np.float64
        self.a = np.ascontiguousarray(a, dtype=dtype)
        self.b = np.ascontiguousarray(b, dtype=dtype)
        if self.a.ndim != 2 or self.b.ndim != 2 or self.a.shape[1] != self.b.shape[0]:
            raise ShapeMismatch(f"cannot multiply {self.a.shape} by {self.b.shape}")
        if self.integer:
            check_accumulator(self.a.shape[1], self.a, self.b)
        self.out_shape = (self.a.shape[0], self.b.shape[1])
        self.extent = self.out_shape[0] * self.out_shape[1]
        self.inner = self.out_shape[1]
        self.macs_per_iter = self.a.shape[1]

    def new_output(self) -> np.ndarray:
        return np.zeros(self.out_shape, dtype=np.int64 if self.integer else np.float64)

    def run(self, out: np.ndarray, start: int, stop: int) -> None:
        if self.integer:
            self.impl.gemm_range_i(self.a, self.b, out, start, stop, *self.requant)
        else:
            self.impl.gemm_range_f(self.a, self.b, out, start, stop)

    def finalize(self, out: np.ndarray):
        if self.fixed:
            return FixedTensor(out.shape, out.copy(), self.out_format)
        return out.copy()


class Conv2dJob:
    """Valid cross-correlation, one iteration per output pixel.

    Accepts ``H x W`` input with an ``kh x kw`` kernel, or ``C x H x W`` input
    with ``F x C x kh x kw`` filters.
    """

    kind = KernelKind.CONV2D

    def __init__(self, x, w, out_format: QFormat | None = None, *, backend=None):
        self.impl = backend or _backend.impl
        self.fixed = isinstance(x, FixedTensor)
        if self.fixed:
            if not isinstance(w, FixedTensor):
                raise TypeError("both operands must be FixedTensor on the fixed path")
            xs, ws = x.codes, w.codes
            depth = int(np.prod(ws.shape[-3:] if ws.ndim == 4 else ws.shape))
            self.out_format = out_format or product_format(x.qformat, w.qformat, depth)
            self.requant = output_multiplier(x.qformat, w.qformat, self.out_format) + (
                -self.out_format.qmax,
                self.out_format.qmax,
            )
            self.integer = True
        else:
            xs, ws = np.asarray(x), np.asarray(w)
            self.integer = np.issubdtype(xs.dtype, np.integer) and np.issubdtype(ws.dtype, np.integer)
            self.out_format = None
            self.requant = (0, 0, 0, 0)
        self.squeeze = xs.ndim == 2
        if self.squeeze:
            if ws.ndim != 2:
                raise ShapeMismatch("2-D input needs a 2-D kernel")
            xs, ws = xs[None], ws[None, None]
        if xs.ndim != 3 or ws.ndim != 4 or ws.shape[1] != xs.shape[0]:
            raise ShapeMismatch(f"incompatible conv shapes {xs.shape} and {ws.shape}")
        dtype = np.int64 if self.integer else np.float64
        self.x = np.ascontiguousarray(xs, dtype=dtype)
        self.w = np.ascontiguousarray(ws, dtype=dtype)
        ho, wo = xs.shape[1] - ws.shape[2] + 1, xs.shape[2] - ws.shape[3] + 1
        if ho < 1 or wo < 1:
            raise ShapeMismatch(f"kernel {ws.shape[2:]} does not fit input {xs.shape[1:]}")
        self.macs_per_iter = ws.shape[1] * ws.shape[2] * ws.shape[3]
        if self.integer:
            check_accumulator(self.macs_per_iter, self.x, self.w)
        self.out_shape = (ws.shape[0], ho, wo)
        self.extent = ws.shape[0] * ho * wo
        self.inner = wo

    def new_output(self) -> np.ndarray:
        return np.zeros(self.out_shape, dtype=np.int64 if self.integer else np.float64)

    def run(self, out: np.ndarray, start: int, stop: int) -> None:
        if self.integer:
            self.impl.conv_range_i(self.x, self.w, out, start, stop, *self.requant)
        else:
            self.impl.conv_range_f(self.x, self.w, out, start, stop)

    def finalize(self, out: np.ndarray):
        res = out[0] if self.squeeze else out
        if self.fixed:
            return FixedTensor(res.shape, res.copy(), self.out_format)
        return res.copy()


def run_continuous(job):
    """The never-interrupted kernel: one pass over the whole iteration space."""
    out = job.new_output()
    job.run(out, 0, job.extent)
    return job.finalize(out)


def plan_for_job(job, profile: HardwareProfile, budget: float, l: int | None = None, fuse: bool = True) -> QuantaPlan:
    """Optimal (or fixed-size ``l``) plan for ``job`` under a per-quanta ``budget`` in uJ."""
    e_iter = job.macs_per_iter * profile.mac_energy(job.kind) / 1000.0
    e_ckpt = profile.e_checkpoint / 1000.0
    plan = plan_loop(job.extent, e_iter, e_ckpt, budget, job.kind, job.inner, l)
    return fuse_tasks(plan, budget) if fuse and l is None else plan


# -------------------------------------------------------------- snapshots

SNAPSHOT_VERSION = 1
_DTYPES = {0: np.dtype("<i2"), 1: np.dtype("<i4"), 2: np.dtype("<i8"), 3: np.dtype("<f8")}


def _dtype_code(arr: np.ndarray) -> int:
    if np.issubdtype(arr.dtype, np.floating):
        return 3
    if arr.size == 0:
        return 0
    lo, hi = int(arr.min()), int(arr.max())
    if -(1 << 15) <= lo and hi < (1 << 15):
        return 0
    if -(1 << 31) <= lo and hi < (1 << 31):
        return 1
    return 2


@dataclass(frozen=True, eq=False)
class CheckpointState:
    indices: tuple[int, ...]
    partial_output: np.ndarray
    plan_position: int
    version: int = SNAPSHOT_VERSION

    def encode(self) -> bytes:
        """Length-prefixed little-endian snapshot with a trailing CRC-32."""
        arr = np.asarray(self.partial_output)
        code = _dtype_code(arr)
        body = bytearray()
        body += struct.pack("<HB", self.version, len(self.indices))
        body += struct.pack(f"<{len(self.indices)}I", *self.indices)
        body += struct.pack("<IBB", self.plan_position, code, arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += arr.astype(_DTYPES[code]).tobytes()
        body += struct.pack("<I", zlib.crc32(body))
        return struct.pack("<I", len(body)) + bytes(body)

    @classmethod
    def decode(cls, blob: bytes) -> "CheckpointState":
        try:
            (length,) = struct.unpack_from("<I", blob, 0)
            if length != len(blob) - 4 or length < 4:
                raise CorruptSnapshot(f"snapshot length {len(blob) - 4} does not match prefix {length}")
            body, (crc,) = blob[4:-4], struct.unpack_from("<I", blob, len(blob) - 4)
            if zlib.crc32(body) != crc:
                raise CorruptSnapshot("checksum mismatch")
            version, ncur = struct.unpack_from("<HB", body, 0)
            if version != SNAPSHOT_VERSION:
                raise VersionMismatch(f"snapshot version {version}, expected {SNAPSHOT_VERSION}")
            off = 3
            indices = struct.unpack_from(f"<{ncur}I", body, off)
            off += 4 * ncur
            pos, code, ndim = struct.unpack_from("<IBB", body, off)
            off += 6
            shape = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            dt = _DTYPES[code]
            n = int(np.prod(shape)) if ndim else 1
            if len(body) - off != n * dt.itemsize:
                raise CorruptSnapshot("payload size does not match shape")
            data = np.frombuffer(body, dtype=dt, count=n, offset=off).reshape(shape)
        except (struct.error, KeyError) as exc:
            raise CorruptSnapshot(f"unreadable snapshot: {exc}") from None
        data = data.astype(np.float64 if code == 3 else np.int64)
        return cls(tuple(indices), data, pos, version)


def save_state(cursor, partial_output, plan_position: int) -> CheckpointState:
    return CheckpointState(tuple(int(i) for i in cursor), np.array(partial_output, copy=True), int(plan_position))


def load_state(snapshot: CheckpointState | bytes) -> tuple[tuple[int, ...], np.ndarray, int]:
    if isinstance(snapshot, (bytes, bytearray)):
        snapshot = CheckpointState.decode(bytes(snapshot))
    elif snapshot.version != SNAPSHOT_VERSION:
        raise VersionMismatch(f"snapshot version {snapshot.version}, expected {SNAPSHOT_VERSION}")
    return snapshot.indices, snapshot.partial_output.copy(), snapshot.plan_position


# ---------------------------------------------------------------- engine


@dataclass(frozen=True)
class LogEvent:
    t: float
    kind: str  # quanta_done | checkpoint | power_loss | restore | wait
    energy_delta_nj: int
    plan_position: int
    task: int | None = None


@dataclass
class ExecutionLog:
    events: list[LogEvent] = field(default_factory=list)

    def add(self, *args, **kwargs) -> None:
        self.events.append(LogEvent(*args, **kwargs))

    def count(self, kind: str) -> int:
        return sum(1 for e in self.events if e.kind == kind)

    def of_kind(self, kind: str) -> list[LogEvent]:
        return [e for e in self.events if e.kind == kind]

    def __len__(self) -> int:
        return len(self.events)


@dataclass(frozen=True)
class FailureSchedule:
    """Injected power losses keyed by quanta launch attempt (0-based).

    ``during`` aborts the attempt and discards its work; ``after`` cuts power
    once the attempt has finished and checkpointed.
    """

    during: frozenset = frozenset()
    after: frozenset = frozenset()
    after_every: bool = False

    @classmethod
    def every_quanta(cls) -> "FailureSchedule":
        return cls(after_every=True)

    @classmethod
    def random(cls, rng: np.random.Generator, attempts: int, p_during: float, p_after: float) -> "FailureSchedule":
        d = frozenset(int(i) for i in np.flatnonzero(rng.random(attempts) < p_during))
        a = frozenset(int(i) for i in np.flatnonzero(rng.random(attempts) < p_after))
        return cls(d, a)

    def fails_during(self, attempt: int) -> bool:
        return attempt in self.during

    def fails_after(self, attempt: int) -> bool:
        return self.after_every or attempt in self.after


@dataclass(frozen=True)
class EngineConfig:
    max_wait_s: float = 3600.0
    wait_step_s: float | None = None  # default: trace sample interval
    energy_factor: float = 1.0  # actual / estimated draw; > 1 models mis-estimation


@dataclass
class IntermittentResult:
    output: object
    log: ExecutionLog
    capacitor: ehsim.CapacitorState
    ledger: ehsim.EnergyLedger
    t_end: float
    attempts: int = 0
    waited_s: float = 0.0

    @property
    def restores(self) -> int:
        return self.log.count("restore")

    @property
    def power_losses(self) -> int:
        return self.log.count("power_loss")


def _nj(uj: float) -> int:
    return int(round(uj * 1000.0))


def run_intermittent(
    job,
    plan: QuantaPlan,
    capacitor: ehsim.CapacitorState,
    trace: ehsim.EnergyTrace,
    profile: HardwareProfile,
    *,
    t0: float = 0.0,
    failures: FailureSchedule | None = None,
    config: EngineConfig = EngineConfig(),
    ledger: ehsim.EnergyLedger | None = None,
    log: ExecutionLog | None = None,
    task: int | None = None,
) -> IntermittentResult:
    """Execute ``job`` quanta by quanta on harvested energy.

    Before each quanta the stored energy is compared with its estimate; if
    short, simulated time advances one wait step while the capacitor charges.
    Every finished quanta commits a snapshot.  A power loss (mid-quanta
    overdraw, an injected failure, or the store hitting empty) drops volatile
    state; the device restores from the last snapshot once it can afford the
    restore.  Raises ``Starvation`` once waiting exceeds ``config.max_wait_s``.
    Quanta over the plan budget are re-split before execution.
    """
    if plan.extent != job.extent or not plan.tiles_exactly():
        raise ShapeMismatch(f"plan covers {plan.extent} iterations, kernel has {job.extent}")
    plan = split_over_budget(plan)
    failures = failures or FailureSchedule()
    log = log if log is not None else ExecutionLog()
    ledger = ledger if ledger is not None else ehsim.EnergyLedger(capacitor.energy_nj)
    wait_step = config.wait_step_s or trace.sample_interval
    restore_nj = _nj(profile.e_restore / 1000.0)
    t_iter = job.macs_per_iter * profile.mac_time(job.kind) * 1e-9

    state = capacitor
    t = t0
    waited = 0.0
    attempt = 0
    out = job.new_output()
    pos = 0
    committed = save_state((0, 0), out, 0).encode()
    committed_pos = 0
    alive = True

    def wait():
        nonlocal state, t, waited
        if waited + wait_step > config.max_wait_s:
            ledger.close(state)
            raise Starvation(f"waited {waited:.3f} s for energy (cap {config.max_wait_s} s) at t={t:.3f}")
        before = state.energy_nj
        state = ehsim.charge(state, trace, t, wait_step, ledger)
        t += wait_step
        waited += wait_step
        log.add(t, "wait", state.energy_nj - before, pos, task)

    while pos < len(plan):
        if not alive:
            if state.energy_nj < restore_nj:
                wait()
                continue
            state, _ = ehsim.debit(state, restore_nj, ledger)
            _, out, pos = load_state(committed)
            alive = True
            log.add(t, "restore", -restore_nj, pos, task)
            continue

        q = plan.quanta[pos]
        need = _nj(q.e)
        if state.energy_nj < need:
            wait()
            continue

        duration = q.l * t_iter
        draw = int(round(need * config.energy_factor))
        state = ehsim.charge(state, trace, t, duration, ledger)
        t += duration
        this_attempt = attempt
        attempt += 1
        if failures.fails_during(this_attempt):
            state, overdrawn = ehsim.debit(state, draw, ledger)
            if not overdrawn:
                ledger.lost_nj += draw
            alive = False
            log.add(t, "power_loss", -draw, pos, task)
            continue
        state, brownout = ehsim.debit(state, draw, ledger)
        if brownout:
            alive = False
            log.add(t, "power_loss", 0, pos, task)
            continue

        job.run(out, q.start, q.stop)
        pos += 1
        log.add(t, "quanta_done", -draw, pos, task)
        if pos != committed_pos:
            cursor = divmod(q.stop, plan.inner) if q.stop < plan.extent else divmod(plan.extent, plan.inner)
            committed = save_state(cursor, out, pos).encode()
            committed_pos = pos
            log.add(t, "checkpoint", 0, pos, task)
        if failures.fails_after(this_attempt) or state.energy_nj == 0:
            alive = False
            log.add(t, "power_loss", 0, pos, task)

    ledger.close(state)
    return IntermittentResult(job.finalize(out), log, state, ledger, t, attempt, waited)
