"""Hardware profiles, the per-kernel energy estimator and a simulated cache sweep.

All shipped profiles are synthetic.  Their constants are shaped to give the
relative ordering of a small, a mid-range and a DSP-equipped microcontroller
and are not measurements of any board.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

from .errors import ProfileError, UnknownKernelKind


class KernelKind(str, enum.Enum):
    GEMM = "gemm"
    MATVEC = "matvec"
    HADAMARD2D = "hadamard2d"
    CONV1D = "conv1d"
    CONV2D = "conv2d"
    DWSCONV2D = "dwsconv2d"


def kernel_kind(kind: KernelKind | str) -> KernelKind:
    try:
        return KernelKind(kind)
    except ValueError:
        raise UnknownKernelKind(f"unknown kernel kind {kind!r}") from None


@dataclass(frozen=True)
class MemoryLevel:
    size: int  # bytes
    access_latency: float  # ns


@dataclass(frozen=True)
class HardwareProfile:
    name: str
    e_per_mac: Mapping[KernelKind, float]  # nJ
    t_per_mac: Mapping[KernelKind, float]  # ns
    e_checkpoint: float  # nJ
    e_restore: float  # nJ
    memory_levels: tuple[MemoryLevel, ...] = ()
    synthetic: bool = True

    def __post_init__(self):
        em = {kernel_kind(k): float(v) for k, v in self.e_per_mac.items()}
        tm = {kernel_kind(k): float(v) for k, v in self.t_per_mac.items()}
        object.__setattr__(self, "e_per_mac", em)
        object.__setattr__(self, "t_per_mac", tm)
        levels = tuple(
            lv if isinstance(lv, MemoryLevel) else MemoryLevel(int(lv[0]), float(lv[1]))
            for lv in self.memory_levels
        )
        object.__setattr__(self, "memory_levels", levels)
        if set(em) != set(tm):
            raise ProfileError(f"{self.name}: e_per_mac and t_per_mac cover different kernels")
        for table in (em, tm):
            for k, v in table.items():
                if not v > 0:
                    raise ProfileError(f"{self.name}: non-positive constant for {k.value}")
        if not (self.e_checkpoint > 0 and self.e_restore > 0):
            raise ProfileError(f"{self.name}: checkpoint/restore energies must be positive")
        for lv in levels:
            if not (lv.size > 0 and lv.access_latency > 0):
                raise ProfileError(f"{self.name}: memory level sizes and latencies must be positive")
        for a, b in zip(levels, levels[1:]):
            if not b.size > a.size:
                raise ProfileError(f"{self.name}: memory levels must increase in size")

    def mac_energy(self, kind: KernelKind | str) -> float:
        kind = kernel_kind(kind)
        try:
            return self.e_per_mac[kind]
        except KeyError:
            raise UnknownKernelKind(f"profile {self.name!r} has no entry for {kind.value}") from None

    def mac_time(self, kind: KernelKind | str) -> float:
        kind = kernel_kind(kind)
        try:
            return self.t_per_mac[kind]
        except KeyError:
            raise UnknownKernelKind(f"profile {self.name!r} has no entry for {kind.value}") from None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "e_per_mac": {k.value: v for k, v in self.e_per_mac.items()},
            "t_per_mac": {k.value: v for k, v in self.t_per_mac.items()},
            "e_checkpoint": self.e_checkpoint,
            "e_restore": self.e_restore,
            "memory_levels": [[lv.size, lv.access_latency] for lv in self.memory_levels],
            "synthetic": self.synthetic,
        }


_PROFILE_FIELDS = {"name", "e_per_mac", "t_per_mac", "e_checkpoint", "e_restore", "memory_levels", "synthetic"}
_REQUIRED = _PROFILE_FIELDS - {"memory_levels", "synthetic"}


def profile_from_dict(data: Mapping) -> HardwareProfile:
    if not isinstance(data, Mapping):
        raise ProfileError("profile must be a JSON object")
    unknown = set(data) - _PROFILE_FIELDS
    if unknown:
        raise ProfileError(f"unknown profile fields: {sorted(unknown)}")
    missing = _REQUIRED - set(data)
    if missing:
        raise ProfileError(f"missing profile fields: {sorted(missing)}")
    try:
        return HardwareProfile(
            name=str(data["name"]),
            e_per_mac=dict(data["e_per_mac"]),
            t_per_mac=dict(data["t_per_mac"]),
            e_checkpoint=float(data["e_checkpoint"]),
            e_restore=float(data["e_restore"]),
            memory_levels=tuple(tuple(lv) for lv in data.get("memory_levels", ())),
            synthetic=bool(data.get("synthetic", True)),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ProfileError):
            raise
        raise ProfileError(f"malformed profile: {exc}") from None


def load_profile(path: str | Path) -> HardwareProfile:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ProfileError(f"{path}: {exc}") from None
    return profile_from_dict(data)


def save_profile(profile: HardwareProfile, path: str | Path) -> None:
    Path(path).write_text(json.dumps(profile.to_dict(), indent=2) + "\n", encoding="utf-8")


BUILTIN_DEVICES = ("synthetic_low", "synthetic_mid", "synthetic_high")


def builtin_profile(name: str) -> HardwareProfile:
    if name not in BUILTIN_DEVICES:
        raise ProfileError(f"no built-in device {name!r}; choose from {BUILTIN_DEVICES}")
    text = resources.files("nexume").joinpath("devices", f"{name}.json").read_text(encoding="utf-8")
    return profile_from_dict(json.loads(text))


def estimate_energy(profile: HardwareProfile, kind: KernelKind | str, l: int, macs_per_iter: int) -> float:
    """Estimated energy in microjoules of ``l`` iterations plus one checkpoint."""
    return estimate_energy_nj(profile, kind, l, macs_per_iter) / 1000.0


def estimate_energy_nj(profile: HardwareProfile, kind: KernelKind | str, l: int, macs_per_iter: int) -> float:
    if l < 0:
        raise ValueError("iteration count must be non-negative")
    return l * macs_per_iter * profile.mac_energy(kind) + profile.e_checkpoint


def level_latency(levels: Sequence[MemoryLevel], working_set: int) -> float:
    """Latency of the smallest level that holds ``working_set``; the last level otherwise."""
    for lv in levels:
        if working_set <= lv.size:
            return lv.access_latency
    return levels[-1].access_latency


def micro_profile(
    sizes: Sequence[int], strides: Sequence[int], device: HardwareProfile
) -> list[tuple[int, int, float]]:
    """Simulated size/stride sweep returning mean per-access latency in ns.

    Each pass touches ``max(1, size // stride)`` addresses of a buffer of
    ``size`` bytes; every access hits the level holding the buffer.
    """
    if not sizes or not strides:
        raise ValueError("sizes and strides must be non-empty")
    if not device.memory_levels:
        raise ProfileError(f"{device.name}: no memory levels to sweep")
    rows = []
    for s in sizes:
        for st in strides:
            accesses = max(1, s // st)
            total = accesses * level_latency(device.memory_levels, s)
            rows.append((int(s), int(st), total / accesses))
    return rows


def _curve(rows):
    st0 = min(r[1] for r in rows)
    return sorted((s, lat) for s, st, lat in rows if st == st0)


def detect_knees(rows: Sequence[tuple[int, int, float]], ratio: float = 2.0) -> list[tuple[int, float]]:
    """Level boundaries found in a sweep, as ``(level size, latency)`` pairs.

    The curve at the smallest stride is scanned in size order; a jump of at
    least ``ratio`` between consecutive points ends a level at the earlier
    point.  A flat curve has no knees.
    """
    if not rows:
        return []
    curve = _curve(rows)
    return [(s_a, lat_a) for (s_a, lat_a), (_, lat_b) in zip(curve, curve[1:]) if lat_b >= ratio * lat_a]


def recover_levels(rows: Sequence[tuple[int, int, float]], ratio: float = 2.0) -> list[MemoryLevel]:
    """Knees plus the final plateau, which is sized by the largest swept point."""
    if not rows:
        return []
    s_last, lat_last = _curve(rows)[-1]
    return [MemoryLevel(s, lat) for s, lat in detect_knees(rows, ratio)] + [MemoryLevel(s_last, lat_last)]


def profile_from_levels(base: HardwareProfile, levels: Sequence[MemoryLevel]) -> HardwareProfile:
    return HardwareProfile(
        name=f"{base.name}-reprofiled",
        e_per_mac=base.e_per_mac,
        t_per_mac=base.t_per_mac,
        e_checkpoint=base.e_checkpoint,
        e_restore=base.e_restore,
        memory_levels=tuple(levels),
        synthetic=base.synthetic,
    )


@dataclass
class ProfileRegistry:
    """Name -> profile lookup, pre-populated with the synthetic devices."""

    profiles: dict[str, HardwareProfile] = field(default_factory=dict)

    def __post_init__(self):
        for name in BUILTIN_DEVICES:
            self.profiles.setdefault(name, builtin_profile(name))

    def register(self, profile: HardwareProfile) -> None:
        self.profiles[profile.name] = profile

    def get(self, name: str) -> HardwareProfile:
        try:
            return self.profiles[name]
        except KeyError:
            raise ProfileError(f"unknown profile {name!r}") from None
