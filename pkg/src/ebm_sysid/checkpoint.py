"""Model checkpoints: one JSON document holding layers, couplings, biases
and the metric.  Values are written with full float64 precision (repr
round-trip); format_version 1."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import energy_core as ec
from . import dynamics as dyn
from ._io import atomic_write_text, canonical_json, sha256_hex

FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def _array_doc(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(v) for v in np.asarray(a).ravel()]}


def _array_from_doc(doc: dict) -> np.ndarray:
    a = np.asarray(doc["data"], dtype=np.float64)
    return a.reshape(doc["shape"])


def _primitive_doc(p: ec.ConvexPrimitive) -> dict:
    if p.kind == "logsumexp":
        return {"kind": p.kind, "params": {"beta": p.beta}}
    if p.kind == "powernorm":
        return {"kind": p.kind, "params": {"q": p.q}}
    return {"kind": p.kind, "params": {}}


def _primitive_from_doc(doc: dict) -> ec.ConvexPrimitive:
    kind = doc["kind"]
    params = doc.get("params", {})
    if kind == "logsumexp":
        return ec.log_sum_exp(beta=float(params.get("beta", 1.0)))
    if kind == "powernorm":
        return ec.power_norm(q=float(params["q"]))
    if kind == "quadratic":
        return ec.quadratic()
    if kind == "logcosh":
        return ec.log_cosh()
    raise CheckpointError(f"unknown primitive kind {kind!r} in checkpoint")


def metric_doc(metric: dyn.MetricField) -> dict:
    if isinstance(metric, dyn.IdentityMetric):
        return {"kind": "identity", "dim": metric.dim}
    if isinstance(metric, dyn.SinCosMetric):
        return {"kind": "sincos", "dim": 2}
    if isinstance(metric, dyn.LearnedPSDMetric):
        return {
            "kind": "learned",
            "dim": metric.dim,
            "eps": metric.eps,
            "b_gain": metric.b_gain,
            "c_gain": metric.c_gain,
            "params": {name: _array_doc(a) for name, a in metric.params().items()},
        }
    raise CheckpointError(f"cannot serialize metric of type {type(metric).__name__}")


def metric_from_doc(doc: dict) -> dyn.MetricField:
    kind = doc["kind"]
    if kind == "identity":
        return dyn.IdentityMetric(dim=int(doc["dim"]))
    if kind == "sincos":
        return dyn.SinCosMetric()
    if kind == "learned":
        params = {name: _array_from_doc(d) for name, d in doc["params"].items()}
        return dyn.LearnedPSDMetric(int(doc["dim"]), params["w1"], params["b1"],
                                    params["w2"], params["b2"], eps=float(doc["eps"]),
                                    b_gain=float(doc["b_gain"]), c_gain=float(doc["c_gain"]))
    raise CheckpointError(f"unknown metric kind {kind!r} in checkpoint")


def checkpoint_doc(model: ec.HybridEBM, metric: dyn.MetricField) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "layers": [{"width": spec.width, **_primitive_doc(spec.primitive)}
                   for spec in model.layers],
        "weights": [_array_doc(w) for w in model.weights],
        "biases": [_array_doc(b) for b in model.biases],
        "metric": metric_doc(metric),
    }


def from_checkpoint_doc(doc: dict) -> tuple[ec.HybridEBM, dyn.MetricField]:
    if doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {doc.get('format_version')!r}")
    layers = [ec.LayerSpec(int(d["width"]), _primitive_from_doc(d)) for d in doc["layers"]]
    weights = [_array_from_doc(d) for d in doc["weights"]]
    biases = [_array_from_doc(d) for d in doc["biases"]]
    model = ec.HybridEBM(layers, weights, biases, require_invariance_conditions=False)
    return model, metric_from_doc(doc["metric"])


def save_checkpoint(model: ec.HybridEBM, metric: dyn.MetricField, path: str | Path):
    atomic_write_text(path, json.dumps(checkpoint_doc(model, metric), indent=1) + "\n")


def load_checkpoint(path: str | Path) -> tuple[ec.HybridEBM, dyn.MetricField]:
    with open(path) as fh:
        doc = json.load(fh)
    return from_checkpoint_doc(doc)


def model_hash(model: ec.HybridEBM, metric: dyn.MetricField) -> str:
    """Checksum of the canonical checkpoint document."""
    return sha256_hex(canonical_json(checkpoint_doc(model, metric)))
