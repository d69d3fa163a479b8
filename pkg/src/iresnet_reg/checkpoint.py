"""Versioned binary checkpoints for diagonal iResNets.

Layout::

    b"IRESNET-CKPT-v1\\n"
    uint64 little-endian length of the JSON header
    JSON header (sorted keys): kind, scalars, and an index of arrays
    raw little-endian float64 array data, in index order

The encoding has no timestamps, so identical nets give identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .exceptions import CheckpointError
from .iresnet_core import LipschitzLayer, MLPDiagonalNet, OneParameterNet, Subnetwork
from .operator_core import SingularSystem
from .spectral_filters import ClosedFormNet

__all__ = ["MAGIC", "dumps", "load_checkpoint", "loads", "save_checkpoint"]

MAGIC = b"IRESNET-CKPT-v1\n"


def _basis_arrays(basis: SingularSystem) -> dict:
    return {"basis.sigma_sq": basis.sigma_sq, "basis.v": basis.v, "basis.u": basis.u}


def _encode(net) -> tuple[dict, dict]:
    if not isinstance(net, (MLPDiagonalNet, OneParameterNet, ClosedFormNet)):
        raise CheckpointError(f"cannot serialize {type(net).__name__}")
    meta ={"L": net.L, "n": net.n, "null_dim": net.basis.null_dim,
            "zero_threshold": net.basis.zero_threshold}
    arrays = _basis_arrays(net.basis)
    if isinstance(net, MLPDiagonalNet):
        sub = net.subnets
        meta.update(kind="mlp_diagonal", widths=list(sub.widths), budgets=list(sub.budgets),
                    output_activation=sub.output_activation,
                    use_bias=[layer.use_bias for layer in sub.layers])
        arrays["alpha"] = sub.alpha
        for k, layer in enumerate(sub.layers):
            for name in ("raw_weight", "bias", "u", "v", "sigma"):
                arrays[f"layer{k}.{name}"] = getattr(layer, name)
    elif isinstance(net, OneParameterNet):
        meta.update(kind="one_parameter")
        arrays["raw_k"] = net.raw_k
    elif isinstance(net, ClosedFormNet):
        meta.update(kind="closed_form", family=net.family, activation=net.activation, k=net.k)
        arrays.update(w=net.w, b=net.b, alpha=net.alpha)
        arrays.update({f"stats.{k}": np.asarray(v, dtype=np.float64) for k, v in sorted(net.stats.items())})
    else:
        raise CheckpointError(f"cannot serialize {type(net).__name__}")
    return meta, arrays


def dumps(net) -> bytes:
    meta, arrays = _encode(net)
    index, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(np.shape(arr)), "offset": offset,
                      "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    meta["arrays"] = index
    header = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def loads(blob: bytes):
    if not blob.startswith(MAGIC):
        raise CheckpointError("not an IRESNET-CKPT-v1 checkpoint")
    pos = len(MAGIC)
    if len(blob) < pos + 8:
        raise CheckpointError("truncated checkpoint header")
    (hlen,) = struct.unpack("<Q", blob[pos : pos + 8])
    pos += 8
    try:
        meta = json.loads(blob[pos : pos + hlen])
    except ValueError as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    pos += hlen
    arrays = {}
    for entry in meta["arrays"]:
        start = pos + entry["offset"]
        data = blob[start : start + entry["nbytes"]]
        if len(data) != entry["nbytes"]:
            raise CheckpointError(f"truncated array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(data, dtype="<f8").reshape(entry["shape"]).astype(np.float64)

    basis = SingularSystem(arrays["basis.sigma_sq"], arrays["basis.v"], arrays["basis.u"],
                           int(meta["null_dim"]), float(meta["zero_threshold"]))
    kind = meta["kind"]
    if kind == "mlp_diagonal":
        layers = []
        for k, budget in enumerate(meta["budgets"]):
            g = lambda name: arrays[f"layer{k}.{name}"]  # noqa: E731
            layers.append(LipschitzLayer(g("raw_weight"), g("bias"), budget, g("u"), g("v"),
                                         g("sigma"), use_bias=meta["use_bias"][k]))
        subnets = Subnetwork(layers, meta["output_activation"], arrays["alpha"])
        return MLPDiagonalNet(basis, meta["L"], subnets)
    if kind == "one_parameter":
        return OneParameterNet(basis, meta["L"], float(arrays["raw_k"][0]))
    if kind == "closed_form":
        stats = {k[6:]: v for k, v in arrays.items() if k.startswith("stats.")}
        return ClosedFormNet(basis, meta["L"], meta["family"], arrays["w"], arrays["b"],
                             meta["activation"], arrays["alpha"], k=meta["k"], stats=stats)
    raise CheckpointError(f"unknown checkpoint kind {kind!r}")


def save_checkpoint(net, path) -> None:
    Path(path).write_bytes(dumps(net))


def load_checkpoint(path):
    return loads(Path(path).read_bytes())
