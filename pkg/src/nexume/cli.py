"""``nexume`` command line: profile, train, simulate, search, report.

Exit status is 0 on success, 1 for invalid input (bad flags, missing files,
malformed configs) and 2 when a run fails part-way (starvation, non-finite
loss).  Outputs are written atomically; progress goes to stderr as JSON lines.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import data as datasets
from . import devmodel, ehsim, nas, scheduler
from .dynfit import modelio
from .dynfit.training import TrainConfig, train
from .errors import ConfigValidation, NexumeError, RuntimeFailure, UnknownSubcommand, ValidationError

SUBCOMMANDS = ("profile", "train", "simulate", "search", "report")


def log_event(event: str, **fields) -> None:
    sys.stderr.write(json.dumps({"event": event, **fields}, sort_keys=True, default=str) + "\n")


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigValidation(f"{self.prog}: {message}")


def _require_file(path, what: str) -> Path:
    if path is None:
        raise ConfigValidation(f"missing required {what} path")
    p = Path(path)
    if not p.is_file():
        raise ConfigValidation(f"{what} file not found: {p}")
    return p


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = _require_file(path, "config")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigValidation(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise ConfigValidation(f"{p}: config must be a JSON object")
    return cfg


def _merge(cfg: dict, args: argparse.Namespace, keys) -> dict:
    """Flags win over config values; keys not listed in ``keys`` are rejected."""
    unknown = sorted(set(cfg) - set(keys))
    if unknown:
        raise ConfigValidation(f"unknown config keys: {unknown}")
    out = dict(cfg)
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def _seed(opts: dict) -> int:
    seed = opts.get("seed")
    if seed is None:
        env = os.environ.get("NEXUME_SEED")
        if env is None:
            raise ConfigValidation("a seed is required (--seed, config 'seed' or NEXUME_SEED)")
        seed = env
    try:
        return int(seed)
    except (TypeError, ValueError) as exc:
        raise ConfigValidation(f"seed must be an integer, got {seed!r}") from exc


def _profile(opts: dict) -> devmodel.HardwareProfile:
    ref = opts.get("profile") or opts.get("device")
    if ref is None:
        raise ConfigValidation("missing required profile path (--profile) or --device")
    if ref in devmodel.BUILTIN_DEVICES and not Path(ref).exists():
        return devmodel.builtin_profile(ref)
    return devmodel.load_profile(_require_file(ref, "profile"))


# ----------------------------------------------------------------- profile

PROFILE_KEYS = ("device", "profile", "sizes", "strides", "ratio", "out", "seed")


def cmd_profile(args) -> int:
    opts = _merge(_load_config(args.config), args, PROFILE_KEYS)
    base = _profile(opts)
    sizes = opts.get("sizes") or [2**k for k in range(8, 22)]
    strides = opts.get("strides") or [64]
    rows = devmodel.micro_profile(sizes, strides, base)
    levels = devmodel.recover_levels(rows, float(opts.get("ratio", 2.0)))
    prof = devmodel.profile_from_levels(base, levels)
    log_event("profile", device=base.name, levels=[[lv.size, lv.access_latency] for lv in levels])
    text = json.dumps(prof.to_dict(), indent=1, sort_keys=True)
    if opts.get("out"):
        atomic_write(opts["out"], text + "\n")
    else:
        sys.stdout.write(text + "\n")
    return 0


# ------------------------------------------------------------------- train

TRAIN_EXTRA = ("data", "out", "architecture", "n_train", "device", "profile", "budget_uj")


def _train_data(opts: dict, seed: int):
    if opts.get("data"):
        return datasets.load_dataset(_require_file(opts["data"], "data"))
    return datasets.shapes_dataset(int(opts.get("n_train") or 600), seed)


def cmd_train(args) -> int:
    import dataclasses

    cfg_keys = [f.name for f in dataclasses.fields(TrainConfig)]
    opts = _merge(_load_config(args.config), args, list(cfg_keys) + [k for k in TRAIN_EXTRA if k not in cfg_keys])
    seed = _seed(opts)
    opts["seed"] = seed
    x, y = _train_data(opts, seed)
    arch = opts.get("architecture") or "2xCONV2D:8[3x3],16[3x3],AvgPool,FC"
    cand = nas.parse_descriptor(arch)
    net = cand.build(tuple(x.shape[1:]), int(np.max(y)) + 1, seed=seed)
    tcfg = modelio.config_from_dict({k: opts[k] for k in cfg_keys if k in opts})
    log_event("train_start", architecture=arch, policy=tcfg.policy, steps=tcfg.steps, seed=seed)
    res = train(net, (x, y), tcfg)
    log_event("train_end", loss_first=res.history[0] if res.history else None, loss_last=res.history[-1] if res.history else None)
    model = modelio.model_to_dict(res.net, res.quant, res.z or None)
    model["dropout_p"] = {str(k): [float(v) for v in p] for k, p in res.probs.items()}
    model["policy"] = tcfg.policy
    text = json.dumps(model, indent=1, sort_keys=True) + "\n"
    out = opts.get("out")
    if out:
        atomic_write(out, text)
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------- simulate

SIM_KEYS = (
    "trace",
    "profile",
    "device",
    "model",
    "data",
    "count",
    "slo_ms",
    "seed",
    "out",
    "capacitance_uf",
    "v_min",
    "v_max",
    "v_start",
    "budget_uj",
    "period_s",
    "escalate",
    "threshold_uj",
    "factor",
    "step_down_q",
    "naive",
    "max_wait_s",
)


def _load_model_file(path):
    p = _require_file(path, "model")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigValidation(f"{p}: invalid JSON ({exc})") from exc
    net, quant, logits = modelio.model_from_dict(raw)
    probs = {int(k): np.array(v) for k, v in raw.get("dropout_p", {}).items()}
    return net, quant, logits, probs


def cmd_simulate(args) -> int:
    opts = _merge(_load_config(args.config), args, SIM_KEYS)
    seed = _seed(opts)
    trace = ehsim.load_trace(_require_file(opts.get("trace"), "trace"))
    profile = _profile(opts)
    net, quant, logits, probs = _load_model_file(opts.get("model"))
    if opts.get("slo_ms") is None:
        raise ConfigValidation("missing --slo-ms")
    count = int(opts.get("count") or 1)
    if opts.get("data"):
        x, y = datasets.load_dataset(_require_file(opts["data"], "data"))
    else:
        x, y = datasets.shapes_dataset(count, seed, size=net.input_shape[-1])
    if x.shape[1:] != net.input_shape:
        raise ConfigValidation(f"data inputs {x.shape[1:]} do not match the model input {net.input_shape}")
    cap = ehsim.CapacitorState.from_voltage(
        float(opts.get("capacitance_uf", 100.0)) * 1e-6,
        float(opts.get("v_start", 3.0)),
        float(opts.get("v_min", 1.8)),
        float(opts.get("v_max", 3.3)),
    )
    esc = scheduler.Escalation(
        enabled=bool(opts.get("escalate", True)),
        threshold_uj=opts.get("threshold_uj"),
        factor=float(opts.get("factor", 1.5)),
        step_down_q=bool(opts.get("step_down_q", False)),
    )
    from .intermittent import EngineConfig

    engine = EngineConfig(max_wait_s=float(opts.get("max_wait_s", 3600.0)))
    stream = scheduler.run_stream(
        net,
        x[:count],
        y[:count],
        trace,
        cap,
        profile,
        float(opts["slo_ms"]),
        probs,
        esc,
        quant=quant,
        mask_logits=logits or None,
        budget_uj=float(opts.get("budget_uj", 20.0)),
        naive=bool(opts.get("naive", False)),
        period_s=float(opts.get("period_s", 0.0)),
        seed=seed,
        config=engine,
    )
    for k, res in enumerate(stream.results):
        for ev in res.log.events:
            log_event(ev.kind, t=ev.t, energy_delta_nj=ev.energy_delta_nj, position=ev.plan_position, task=ev.task, inference=k)
    reports = [r.report() for r in stream.results]
    payload = reports[0] if count == 1 else {"reports": reports, "summary": stream.summary()}
    text = json.dumps(payload, indent=1, sort_keys=True) + "\n"
    if opts.get("out"):
        atomic_write(opts["out"], text)
    else:
        sys.stdout.write(text)
    return 0


# ------------------------------------------------------------------ search

SEARCH_KEYS = (
    "trace",
    "profile",
    "device",
    "slo_ms",
    "seed",
    "out",
    "train_steps",
    "data",
    "conv_counts",
    "filters",
    "kernels",
    "policies",
    "initial_uj",
    "lr",
    "n_train",
)


def cmd_search(args) -> int:
    opts = _merge(_load_config(args.config), args, SEARCH_KEYS)
    seed = _seed(opts)
    trace = ehsim.load_trace(_require_file(opts.get("trace"), "trace"))
    profile = _profile(opts)
    slo = float(opts["slo_ms"]) if opts.get("slo_ms") is not None else math.inf
    space_kw = {}
    for key in ("conv_counts", "filters", "policies"):
        if opts.get(key):
            space_kw[key] = tuple(opts[key])
    if opts.get("kernels"):
        space_kw["kernels"] = tuple(tuple(k) for k in opts["kernels"])
    if opts.get("data"):
        x, y = datasets.load_dataset(_require_file(opts["data"], "data"))
        split = int(0.8 * len(x))
        tr, va = (x[:split], y[:split]), (x[split:], y[split:])
        space_kw["input_shape"] = tuple(x.shape[1:])
        space_kw["n_classes"] = int(np.max(y)) + 1
    else:
        n = int(opts.get("n_train") or 400)
        tr, va = datasets.shapes_dataset(n, seed), datasets.shapes_dataset(n // 4, seed + 1)
    space = nas.SearchSpace(**space_kw)
    ests = nas.enumerate_and_filter(space, profile, trace, slo, float(opts.get("initial_uj", 0.0)))
    log_event("enumerated", candidates=len(ests), feasible=sum(e.feasible for e in ests))
    cfg = TrainConfig(seed=seed, lr=float(opts.get("lr", 0.05)))
    ranked = nas.search(ests, int(opts.get("train_steps", 100)), tr, va, cfg, space.input_shape, space.n_classes)
    rest = [e for e in ests if not e.feasible]
    text = nas.report_csv(ranked + rest)
    if opts.get("out"):
        atomic_write(opts["out"], text)
    else:
        sys.stdout.write(text)
    return 0


# ------------------------------------------------------------------ report


def _summarize_reports(reports: list[dict]) -> dict:
    n = len(reports)
    return {
        "inferences": n,
        "accuracy": sum(bool(r.get("correct")) for r in reports) / n if n else 0.0,
        "slo_accuracy": sum(bool(r["counted_correct"]) for r in reports) / n if n else 0.0,
        "mean_latency_ms": sum(r["latency_ms"] for r in reports) / n if n else 0.0,
        "escalations": sum(r["escalations"] for r in reports),
        "restores": sum(r["restores"] for r in reports),
        "energy_consumed_uJ": sum(r["energy_consumed_uJ"] for r in reports),
    }


def cmd_report(args) -> int:
    p = _require_file(args.input, "input")
    text = p.read_text()
    if p.suffix == ".csv":
        rows = list(csv.DictReader(io.StringIO(text)))
        feasible = [r for r in rows if r.get("feasible") == "1"]
        summary = {"candidates": len(rows), "feasible": len(feasible), "best": feasible[0]["candidate"] if feasible else None}
    else:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigValidation(f"{p}: invalid JSON ({exc})") from exc
        if isinstance(data, dict) and "reports" in data:
            summary = _summarize_reports(data["reports"])
        elif isinstance(data, dict) and "counted_correct" in data:
            summary = _summarize_reports([data])
        else:
            raise ConfigValidation(f"{p}: not a simulate report or search CSV")
    out = json.dumps(summary, indent=1, sort_keys=True) + "\n"
    if args.out:
        atomic_write(args.out, out)
    else:
        sys.stdout.write(out)
    return 0


# -------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nexume", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("profile", help="micro-profile a device and recover its memory levels")
    p.add_argument("--config")
    p.add_argument("--device")
    p.add_argument("--profile")
    p.add_argument("--sizes", type=int, nargs="+")
    p.add_argument("--strides", type=int, nargs="+")
    p.add_argument("--ratio", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("train", help="train a network with dynamic dropout")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--architecture")
    p.add_argument("--policy")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="run inference on harvested energy")
    p.add_argument("--config")
    p.add_argument("--trace")
    p.add_argument("--profile")
    p.add_argument("--device")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--count", type=int)
    p.add_argument("--slo-ms", dest="slo_ms", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--budget-uj", dest="budget_uj", type=float)
    p.add_argument("--capacitance-uf", dest="capacitance_uf", type=float)
    p.add_argument("--v-start", dest="v_start", type=float)
    p.add_argument("--period-s", dest="period_s", type=float)
    p.add_argument("--threshold-uj", dest="threshold_uj", type=float)
    p.add_argument("--no-escalation", dest="escalate", action="store_const", const=False)
    p.add_argument("--step-down-q", dest="step_down_q", action="store_const", const=True)
    p.add_argument("--naive", action="store_const", const=True)
    p.add_argument("--max-wait-s", dest="max_wait_s", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("search", help="enumerate, filter and rank small CNNs")
    p.add_argument("--config")
    p.add_argument("--trace")
    p.add_argument("--profile")
    p.add_argument("--device")
    p.add_argument("--slo-ms", dest="slo_ms", type=float)
    p.add_argument("--train-steps", dest="train_steps", type=int)
    p.add_argument("--initial-uj", dest="initial_uj", type=float)
    p.add_argument("--data")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("report", help="summarize a simulate report or search CSV")
    p.add_argument("input")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        if not argv or argv[0] not in SUBCOMMANDS and not argv[0].startswith("-"):
            raise UnknownSubcommand(f"unknown subcommand {argv[0] if argv else ''!r}; expected one of {SUBCOMMANDS}")
        args = build_parser().parse_args(argv)
        if not getattr(args, "command", None):
            raise UnknownSubcommand(f"expected one of {SUBCOMMANDS}")
        return args.func(args)
    except ValidationError as exc:
        log_event("error", kind=type(exc).__name__, message=str(exc))
        return 1
    except RuntimeFailure as exc:
        log_event("error", kind=type(exc).__name__, message=str(exc))
        return 2
    except NexumeError as exc:
        log_event("error", kind=type(exc).__name__, message=str(exc))
        return 2


if __name__ == "__main__":
    sys.exit(main())
