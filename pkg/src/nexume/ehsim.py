"""Energy income and storage: harvested-power trace replay and a capacitor model.

The capacitor keeps its usable energy as an integer number of nanojoules so
that every simulation can balance its books exactly; voltages are derived on
demand.  Power between trace samples follows a zero-order hold and the trace
repeats cyclically once its last sample interval has elapsed.
"""

from __future__ import annotations

import bisect
import csv
import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

from .errors import EmptyTrace, NonMonotonicTime, ParseError

TRACE_HEADER = ("t_s", "power_uW")


class SourceKind(str, enum.Enum):
    SOLAR_OUTDOOR = "solar_outdoor"
    SOLAR_INDOOR = "solar_indoor"
    RF_WIFI_HOME = "rf_wifi_home"
    RF_WIFI_OFFICE = "rf_wifi_office"
    THERMAL = "thermal"
    PIEZO = "piezo"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class EnergyTrace:
    """Harvested power samples ``(t seconds, power microwatts)``."""

    times: tuple[float, ...]
    powers: tuple[float, ...]
    sample_interval: float
    source_kind: SourceKind = SourceKind.SYNTHETIC
    _cum: tuple[float, ...] = field(init=False, repr=False, compare=False)
    _rel: tuple[float, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.times:
            raise EmptyTrace("trace has no samples")
        if len(self.times) != len(self.powers):
            raise ParseError("times and powers differ in length")
        for a, b in zip(self.times, self.times[1:]):
            if not b > a:
                raise NonMonotonicTime(f"timestamp {b} does not follow {a}")
        for p in self.powers:
            if not (p >= 0 and math.isfinite(p)):
                raise ParseError(f"invalid power sample {p!r}")
        if not self.sample_interval > 0:
            raise ParseError("sample_interval must be positive")
        t0 = self.times[0]
        rel = tuple(t - t0 for t in self.times)
        cum = [0.0]
        for i in range(1, len(rel)):
            cum.append(cum[-1] + self.powers[i - 1] * (rel[i] - rel[i - 1]))
        object.__setattr__(self, "_rel", rel)
        object.__setattr__(self, "_cum", tuple(cum))

    @classmethod
    def from_samples(
        cls,
        samples: Iterable[tuple[float, float]],
        sample_interval: float | None = None,
        source_kind: SourceKind | str = SourceKind.SYNTHETIC,
    ) -> "EnergyTrace":
        samples = list(samples)
        if not samples:
            raise EmptyTrace("trace has no samples")
        times = tuple(float(t) for t, _ in samples)
        powers = tuple(float(p) for _, p in samples)
        if sample_interval is None:
            sample_interval = times[1] - times[0] if len(times) > 1 else 1.0
        return cls(times, powers, float(sample_interval), SourceKind(source_kind))

    @classmethod
    def constant(cls, power_uw: float, sample_interval: float = 1.0) -> "EnergyTrace":
        return cls.from_samples([(0.0, power_uw)], sample_interval)

    def __len__(self) -> int:
        return len(self.times)

    @property
    def period(self) -> float:
        """Replay period: last timestamp plus one sample interval."""
        return self._rel[-1] + self.sample_interval

    @property
    def mean_power(self) -> float:
        return self._period_energy() / self.period

    def _period_energy(self) -> float:
        return self._cum[-1] + self.powers[-1] * self.sample_interval

    def power_at(self, t: float) -> float:
        y = (t - self.times[0]) % self.period
        return self.powers[bisect.bisect_right(self._rel, y) - 1]

    def _energy_to(self, x: float) -> float:
        if x <= 0:
            return 0.0
        cycles, y = divmod(x, self.period)
        i = bisect.bisect_right(self._rel, y) - 1
        partial = self._cum[i] + self.powers[i] * (y - self._rel[i])
        return cycles * self._period_energy() + partial

    def harvested_uj(self, t: float, dt: float) -> float:
        """Energy (uJ) delivered by the source over ``[t, t + dt)``."""
        t0 = self.times[0]
        return max(0.0, self._energy_to(t + dt - t0) - self._energy_to(t - t0))

    def samples(self) -> list[tuple[float, float]]:
        return list(zip(self.times, self.powers))

    def scaled(self, factor: float) -> "EnergyTrace":
        return replace(self, powers=tuple(p * factor for p in self.powers))


def load_trace(path: str | Path, source_kind: SourceKind | str = SourceKind.SYNTHETIC) -> EnergyTrace:
    """Parse a ``t_s,power_uW`` CSV file."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyTrace(f"{path}: empty file") from None
        if tuple(h.strip() for h in header) != TRACE_HEADER:
            raise ParseError(f"{path}: expected header {','.join(TRACE_HEADER)!r}, got {header!r}")
        samples = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise ParseError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
            try:
                t, p = float(row[0]), float(row[1])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric field in {row!r}") from None
            if not (math.isfinite(t) and math.isfinite(p)) or p < 0:
                raise ParseError(f"{path}:{lineno}: invalid sample {row!r}")
            samples.append((t, p))
    if not samples:
        raise EmptyTrace(f"{path}: no samples")
    return EnergyTrace.from_samples(samples, source_kind=source_kind)


def dump_trace(trace: EnergyTrace, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(TRACE_HEADER) + "\n")
        for t, p in trace.samples():
            fh.write(f"{t!r},{p!r}\n")


def _to_nj(uj: float) -> int:
    return int(round(uj * 1000.0))


@dataclass(frozen=True)
class CapacitorState:
    """Storage capacitor.  ``energy_nj`` is the usable energy above ``v_min``."""

    capacitance: float
    v_min: float
    v_max: float
    energy_nj: int
    efficiency: float = 1.0

    def __post_init__(self):
        if self.capacitance < 0:
            raise ValueError("capacitance must be non-negative")
        if not 0 < self.efficiency <= 1:
            raise ValueError("efficiency must lie in (0, 1]")
        if self.v_max < self.v_min:
            raise ValueError("v_max below v_min")
        if not 0 <= self.energy_nj <= self.max_nj:
            raise ValueError(f"energy {self.energy_nj} nJ outside [0, {self.max_nj}]")

    @classmethod
    def from_voltage(
        cls, capacitance: float, v_now: float, v_min: float, v_max: float, efficiency: float = 1.0
    ) -> "CapacitorState":
        if not v_min <= v_now <= v_max:
            raise ValueError(f"v_now={v_now} outside [{v_min}, {v_max}]")
        e = _to_nj(0.5 * capacitance * (v_now**2 - v_min**2) * 1e6)
        e = min(e, _to_nj(0.5 * capacitance * (v_max**2 - v_min**2) * 1e6))
        return cls(capacitance, v_min, v_max, e, efficiency)

    @property
    def max_nj(self) -> int:
        return _to_nj(0.5 * self.capacitance * (self.v_max**2 - self.v_min**2) * 1e6)

    @property
    def v_now(self) -> float:
        if self.capacitance == 0:
            return self.v_min
        v = math.sqrt(self.v_min**2 + 2.0 * self.energy_nj * 1e-9 / self.capacitance)
        return min(v, self.v_max)

    def with_energy(self, energy_nj: int) -> "CapacitorState":
        return replace(self, energy_nj=int(energy_nj))


def usable_energy(state: CapacitorState) -> float:
    """Usable stored energy in microjoules."""
    return state.energy_nj / 1000.0


@dataclass
class EnergyLedger:
    """Integer-nanojoule account of one simulation.

    Balances when ``initial + harvested - spilled - debited == final``.
    ``spilled`` is income that arrived while the capacitor was already full.
    """

    initial_nj: int
    harvested_nj: int = 0
    spilled_nj: int = 0
    debited_nj: int = 0
    lost_nj: int = 0
    final_nj: int | None = None

    def close(self, state: CapacitorState) -> None:
        self.final_nj = state.energy_nj

    def balanced(self) -> bool:
        if self.final_nj is None:
            return False
        flow = self.initial_nj + self.harvested_nj - self.spilled_nj - self.debited_nj
        return flow == self.final_nj and self.debited_nj <= self.initial_nj + self.harvested_nj

    def as_dict(self) -> dict:
        return {
            "initial_nJ": self.initial_nj,
            "harvested_nJ": self.harvested_nj,
            "spilled_nJ": self.spilled_nj,
            "debited_nJ": self.debited_nj,
            "lost_nJ": self.lost_nj,
            "final_nJ": self.final_nj,
        }


def harvest_nj(state: CapacitorState, trace: EnergyTrace, t: float, dt: float) -> int:
    return _to_nj(trace.harvested_uj(t, dt) * state.efficiency)


def charge(
    state: CapacitorState, trace: EnergyTrace, t: float, dt: float, ledger: EnergyLedger | None = None
) -> CapacitorState:
    """Accumulate income over ``[t, t + dt)`` with no draw."""
    gained = harvest_nj(state, trace, t, dt)
    return _apply(state, gained, 0, ledger)[0]


def debit(state: CapacitorState, draw_nj: int, ledger: EnergyLedger | None = None) -> tuple[CapacitorState, bool]:
    """Withdraw ``draw_nj``; on overdraw the store empties and nothing is delivered."""
    return _apply(state, 0, draw_nj, ledger)


def _apply(state, gained, draw_nj, ledger):
    if draw_nj < 0:
        raise ValueError("draw must be non-negative")
    cap = state.max_nj
    available = state.energy_nj + gained
    spilled = max(0, available - cap)
    available -= spilled
    if draw_nj > available:
        taken, left, brownout = available, 0, True
    else:
        taken, left, brownout = draw_nj, available - draw_nj, False
    if ledger is not None:
        ledger.harvested_nj += gained
        ledger.spilled_nj += spilled
        ledger.debited_nj += taken
        if brownout:
            ledger.lost_nj += taken
    return state.with_energy(left), brownout


def step(
    state: CapacitorState,
    trace: EnergyTrace,
    t: float,
    dt: float,
    draw: float,
    ledger: EnergyLedger | None = None,
) -> tuple[CapacitorState, bool]:
    """Advance by ``dt`` seconds while drawing ``draw`` microjoules.

    Income over the interval is credited first (clamped at the capacitor's
    maximum), then the draw is debited.  Returns the new state and a brownout
    flag.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if draw < 0:
        raise ValueError("draw must be non-negative")
    return _apply(state, harvest_nj(state, trace, t, dt), _to_nj(draw), ledger)


def piezo_trace(
    duration_s: float,
    sample_interval: float = 0.005,
    burst_period_s: float = 0.25,
    burst_len_s: float = 0.04,
    burst_power_uw: float = 2000.0,
    floor_uw: float = 0.0,
    seed: int = 0,
    jitter: float = 0.3,
) -> EnergyTrace:
    """Bursty vibration-harvester-like trace: short high-power bursts over a low floor."""
    import numpy as np

    rng = np.random.default_rng(seed)
    n = max(1, int(round(duration_s / sample_interval)))
    samples: list[tuple[float, float]] = []
    next_burst = float(rng.uniform(0, burst_period_s))
    burst_end = -1.0
    amp = burst_power_uw
    for k in range(n):
        t = k * sample_interval
        if t >= next_burst:
            amp = burst_power_uw * float(1.0 + jitter * rng.uniform(-1, 1))
            burst_end = t + burst_len_s
            next_burst += burst_period_s * float(1.0 + jitter * rng.uniform(-1, 1))
        p = amp if t < burst_end else floor_uw
        samples.append((round(t, 9), max(0.0, p)))
    return EnergyTrace.from_samples(samples, sample_interval, SourceKind.PIEZO)

