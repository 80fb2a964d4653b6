"""Flat binary model dump with a versioned JSON header.

Layout::

    b"DATSMDL\\0"  | uint32 version | uint32 header_len | header (UTF-8 JSON)
    | float64 little-endian arrays, concatenated in header order

The header records every array's name and shape, plus scalar metadata.
Optimizer moments and per-epoch statistics are not stored; a loaded model
supports prediction, evaluation and inspection, not resumed training.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import domain_weights as dw
from .errors import LoadError
from .nn import DenseLayer
from .trainer import ModelState

MAGIC = b"DATSMDL\0"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<II")


def _network_arrays(prefix, layers):
    for i, layer in enumerate(layers):
        yield f"{prefix}.{i}.weight", layer.weight
        yield f"{prefix}.{i}.bias", layer.bias


def save_model(path, state: ModelState, config: dict | None = None) -> Path:
    arrays = [
        *_network_arrays("feature", state.feature),
        *_network_arrays("label", state.label),
        *_network_arrays("domain", state.domain),
        ("gamma_logits", state.gamma_logits),
        ("lambda", state.lam),
        *((f"source_proportions.{s}", p) for s, p in enumerate(state.source_proportions)),
    ]
    header = {
        "n_classes": state.n_classes,
        "n_sources": state.n_sources,
        "iteration": state.iteration,
        "rho": state.weights.rho,
        "bandwidth": state.bandwidth,
        "activations": {
            "feature": [l.activation for l in state.feature],
            "label": [l.activation for l in state.label],
            "domain": [l.activation for l in state.domain],
        },
        "config": config,
        "arrays": [{"name": n, "shape": list(np.shape(a))} for n, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(_PREFIX.pack(FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return path


def read_header(path) -> tuple[dict, bytes]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise LoadError(f"{path}: {exc.strerror or exc}") from None
    if not raw.startswith(MAGIC):
        raise LoadError(f"{path}: not a model file (bad magic)")
    off = len(MAGIC)
    if len(raw) < off + _PREFIX.size:
        raise LoadError(f"{path}: truncated header")
    version, hlen = _PREFIX.unpack_from(raw, off)
    if version != FORMAT_VERSION:
        raise LoadError(f"{path}: unsupported format version {version}")
    off += _PREFIX.size
    try:
        header = json.loads(raw[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise LoadError(f"{path}: corrupt header ({exc})") from None
    return header, raw[off + hlen:]


def load_model(path) -> tuple[ModelState, dict]:
    """Return the model and its header (which carries the training config)."""
    header, body = read_header(path)
    arrays = {}
    pos = 0
    for entry in header["arrays"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        chunk = body[pos:pos + 8 * n]
        if len(chunk) != 8 * n:
            raise LoadError(f"{path}: truncated array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(entry["shape"]).astype(np.float64)
        pos += 8 * n
    if pos != len(body):
        raise LoadError(f"{path}: {len(body) - pos} trailing bytes")

    def net(prefix):
        acts = header["activations"][prefix]
        return [DenseLayer(arrays[f"{prefix}.{i}.weight"], arrays[f"{prefix}.{i}.bias"], act)
                for i, act in enumerate(acts)]

    state = ModelState(
        feature=net("feature"),
        label=net("label"),
        domain=net("domain"),
        gamma_logits=arrays["gamma_logits"],
        weights=dw.DomainWeightState(arrays["lambda"], header["rho"]),
        source_proportions=[arrays[f"source_proportions.{s}"] for s in range(header["n_sources"])],
        n_classes=int(header["n_classes"]),
        iteration=int(header["iteration"]),
        bandwidth=header["bandwidth"],
    )
    return state, header
