"""JSON model files (base64 little-endian f32 weights) and training configs."""

from __future__ import annotations

import base64
import dataclasses
import json
from pathlib import Path

import numpy as np

from ..errors import ConfigValidation, ParseError
from .network import Activation, AvgPool, Conv2D, Dense, DWSConv2D, Layer, Network
from .training import QuantAssignment, TrainConfig

MODEL_FORMAT_VERSION = 1


def _enc(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f4").tobytes()).decode("ascii")


def _dec(s: str, shape) -> np.ndarray:
    arr = np.frombuffer(base64.b64decode(s), dtype="<f4")
    if arr.size != int(np.prod(shape)):
        raise ParseError(f"weight blob holds {arr.size} values, shape {shape} needs {int(np.prod(shape))}")
    return arr.astype(np.float64).reshape(shape)


def model_to_dict(net: Network, quant: QuantAssignment | None = None, mask_logits: dict | None = None) -> dict:
    layers = []
    for i, layer in enumerate(net.layers):
        entry = layer.spec()
        if layer.neurons:
            entry["weights"] = {k: _enc(v) for k, v in layer.params.items()}
            if quant is not None and quant.for_layer(i) is not None:
                entry["q"] = [int(b) for b in quant.for_layer(i)]
            if mask_logits and i in mask_logits:
                entry["mask_logits"] = [float(v) for v in mask_logits[i]]
        layers.append(entry)
    out = {
        "format_version": MODEL_FORMAT_VERSION,
        "input_shape": list(net.input_shape),
        "loss": net.loss_kind,
        "layers": layers,
    }
    if quant is not None:
        out["quant_lambda"] = quant.lam
    return out


def _layer_from(entry: dict) -> Layer:
    kind = entry.get("kind")
    shape = entry.get("shape", [])
    act = entry.get("activation", "linear")
    w = entry.get("weights", {})
    if kind == "dense":
        n_out, n_in = shape
        return Dense(n_in, n_out, act, W=_dec(w["W"], (n_out, n_in)), b=_dec(w["b"], (n_out,)))
    if kind == "conv2d":
        f, c, kh, kw = shape
        return Conv2D(c, f, kh, kw, act, W=_dec(w["W"], (f, c, kh, kw)), b=_dec(w["b"], (f,)))
    if kind == "dwsconv2d":
        f, c, kh, kw = shape
        return DWSConv2D(
            c, f, kh, kw, act, dw=_dec(w["dw"], (c, kh, kw)), pw=_dec(w["W"], (f, c)), b=_dec(w["b"], (f,))
        )
    if kind == "avgpool":
        return AvgPool(shape[0] if shape else None)
    if kind == "activation":
        return Activation(act)
    raise ParseError(f"unknown layer kind {kind!r}")


def model_from_dict(d: dict) -> tuple[Network, QuantAssignment, dict]:
    """Returns ``(net, quant, mask_logits)``; missing q entries default to 16 bits."""
    if d.get("format_version") != MODEL_FORMAT_VERSION:
        raise ParseError(f"unsupported model format version {d.get('format_version')!r}")
    try:
        layers = [_layer_from(e) for e in d["layers"]]
        net = Network(layers, d["input_shape"], d.get("loss", "ce"))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed model: {exc}") from exc
    quant = QuantAssignment.uniform(net, 16, d.get("quant_lambda", 0.01))
    logits = {}
    for i, e in enumerate(d["layers"]):
        if "q" in e:
            a, b = quant.layout[i]
            quant.q[a:b] = e["q"]
        if "mask_logits" in e:
            logits[i] = np.array(e["mask_logits"], dtype=np.float64)
    quant = QuantAssignment(quant.q, quant.c, quant.lam, quant.layout)
    return net, quant, logits


def save_model(net: Network, path, quant=None, mask_logits=None) -> None:
    Path(path).write_text(json.dumps(model_to_dict(net, quant, mask_logits), indent=1, sort_keys=True))


def load_model(path) -> tuple[Network, QuantAssignment, dict]:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: not JSON ({exc})") from exc
    return model_from_dict(data)


_CONFIG_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}


def config_from_dict(d: dict) -> TrainConfig:
    unknown = sorted(set(d) - _CONFIG_FIELDS)
    if unknown:
        raise ConfigValidation(f"unknown training config keys: {unknown}")
    try:
        cfg = TrainConfig(**d)
        cfg.policy_obj()
    except (TypeError, ValueError) as exc:
        raise ConfigValidation(f"bad training config: {exc}") from exc
    return cfg


def config_to_dict(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)
