"""Value and generator networks.

Both networks share the same construction: each scalar financial input
is expanded to 50 features by its own linear layer, a 5-dimensional
sentiment vector is embedded to 50 features and scaled by a learnable
gate, and the concatenation feeds a dense backbone whose hidden layers
use an adaptive activation (a learnable, L2-normalized mixture of sin,
tanh, GELU, SiLU and Softplus). The value network ends in separate call
and put heads reading the same backbone output; the generator network
additionally consumes the running value and hedge inputs and ends in a
single output head.

Parameters live in a flat float64 vector with named slices so the
optimizer, freeze masks and checkpoints all address the same layout.
"""

from __future__ import annotations

import json
import math
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .autodiff import (TV, Tape, concat, gelu, norm_cdf, norm_pdf, register_op,
                       silu, softplus)
from .errors import ConfigError, DataError

EXPAND_DIM = 50
SENT_DIM = 5
VALUE_CHANNELS = ("t", "x", "k", "tau", "sigma", "r")
GEN_CHANNELS = ("t", "x", "y", "z", "k", "tau", "sigma", "r")
BACKBONE_VALUE = (350, 300, 256, 256, 128)
BACKBONE_GEN = (450, 300, 256, 256, 128)
AAF_INIT = (0.2, 0.2, 0.2, 0.2, 0.2)
AAF_NORM_FLOOR = 1e-6
EXPANSION_GAIN = 0.01
# Heads share the expansion gain so a fresh net prices near zero even
# for raw CNY-scale inputs; the hidden backbone keeps the standard gain.
HEAD_GAIN = 0.01
DROPOUT_RATE = 0.1

# Sentiment vector layout per moneyness class; recorded in the feature
# manifest so checkpoints and feature files agree on channel order.
SENTIMENT_LAYOUT = {
    "ATM": ("net_sent", "surprise_3", "disp_3", "z_activity", "entropy"),
    "OTM": ("surprise_5", "disp_5", "extreme_flag", "vol_shock_flag", "ewm_net_sent"),
    "ITM": ("zero", "zero", "zero", "zero", "zero"),
}


class ParamStore:
    """Flat parameter vector with named, shaped slices."""

    def __init__(self, layout: Sequence[Tuple[str, Tuple[int, ...]]]):
        self.layout = [(name, tuple(shape)) for name, shape in layout]
        self._slices: Dict[str, Tuple[slice, Tuple[int, ...]]] = {}
        off = 0
        for name, shape in self.layout:
            n = int(np.prod(shape)) if shape else 1
            self._slices[name] = (slice(off, off + n), shape)
            off += n
        self.vector = np.zeros(off, dtype=np.float64)

    @property
    def names(self) -> List[str]:
        return [name for name, _ in self.layout]

    @property
    def size(self) -> int:
        return self.vector.size

    def get(self, name: str) -> np.ndarray:
        sl, shape = self._slices[name]
        return self.vector[sl].reshape(shape)

    def set(self, name: str, value) -> None:
        sl, shape = self._slices[name]
        self.vector[sl] = np.asarray(value, dtype=np.float64).reshape(-1)

    def slice_of(self, name: str) -> slice:
        return self._slices[name][0]

    def mask_for(self, names: Iterable[str]) -> np.ndarray:
        """Boolean trainability mask, True on the given slices."""
        mask = np.zeros(self.size, dtype=bool)
        for name in names:
            mask[self.slice_of(name)] = True
        return mask

    def copy(self) -> "ParamStore":
        out = ParamStore(self.layout)
        out.vector[:] = self.vector
        return out


def _net_layout(channels, heads, expand_dim: int,
                hidden: Sequence[int]) -> List[Tuple[str, Tuple[int, ...]]]:
    layout: List[Tuple[str, Tuple[int, ...]]] = []
    for ch in channels:
        layout.append((f"exp.{ch}.w", (expand_dim,)))
        layout.append((f"exp.{ch}.b", (expand_dim,)))
    layout.append(("sent.w", (SENT_DIM, expand_dim)))
    layout.append(("sent.b", (expand_dim,)))
    layout.append(("gate", (1,)))
    widths = (expand_dim * (len(channels) + 1),) + tuple(hidden)
    for i in range(len(widths) - 1):
        layout.append((f"backbone.{i + 1}.w", (widths[i], widths[i + 1])))
        layout.append((f"backbone.{i + 1}.b", (widths[i + 1],)))
        layout.append((f"aaf.{i + 1}", (5,)))
    for head in heads:
        layout.append((f"{head}.w", (widths[-1],)))
        layout.append((f"{head}.b", (1,)))
    return layout


def value_layout(expand_dim: int = EXPAND_DIM,
                 hidden: Sequence[int] = BACKBONE_VALUE[1:]):
    return _net_layout(VALUE_CHANNELS, ("head.call", "head.put"), expand_dim, hidden)


def generator_layout(expand_dim: int = EXPAND_DIM,
                     hidden: Sequence[int] = BACKBONE_GEN[1:]):
    return _net_layout(GEN_CHANNELS, ("out",), expand_dim, hidden)


def _xavier(rng: np.random.Generator, shape, gain: float, fan_in: int, fan_out: int):
    limit = gain * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _init_store(layout, seed: int, gate_init: float) -> ParamStore:
    store = ParamStore(layout)
    rng = np.random.Generator(np.random.PCG64(seed))
    for name, shape in layout:
        if name.startswith("exp.") and name.endswith(".w"):
            store.set(name, _xavier(rng, shape, EXPANSION_GAIN, 1, shape[0]))
        elif name == "sent.w":
            store.set(name, _xavier(rng, shape, EXPANSION_GAIN, shape[0], shape[1]))
        elif name == "gate":
            store.set(name, [gate_init])
        elif name.startswith("aaf."):
            store.set(name, AAF_INIT)
        elif name.startswith("backbone.") and name.endswith(".w"):
            store.set(name, _xavier(rng, shape, 1.0, shape[0], shape[1]))
        elif (name.startswith("head.") or name == "out.w") and name.endswith(".w"):
            store.set(name, _xavier(rng, shape, HEAD_GAIN, shape[0], 1))
        # biases stay zero
    return store


def init_value_params(seed: int, gate_init: float = 0.0,
                      expand_dim: int = EXPAND_DIM,
                      hidden: Sequence[int] = BACKBONE_VALUE[1:]) -> ParamStore:
    """Fresh value-net parameters: 0.01-gain Xavier expansions, zero
    biases, equal-weight activation mixtures, gate at `gate_init`."""
    return _init_store(value_layout(expand_dim, hidden), seed, gate_init)


def init_generator_params(seed: int, gate_init: float = 0.0,
                          expand_dim: int = EXPAND_DIM,
                          hidden: Sequence[int] = BACKBONE_GEN[1:]) -> ParamStore:
    return _init_store(generator_layout(expand_dim, hidden), seed, gate_init)


def aaf(x, w) -> float:
    """Adaptive activation: weighted activation mix divided by ||w||2.

    Exactly invariant under positive rescaling of w. Callers keep
    ||w||2 above AAF_NORM_FLOOR (see enforce_aaf_floor).
    """
    w = np.asarray(w, dtype=np.float64)
    mix = (w[0] * np.sin(x) + w[1] * np.tanh(x) + w[2] * gelu(x)
           + w[3] * silu(x) + w[4] * softplus(x))
    return mix / np.linalg.norm(w)


def enforce_aaf_floor(store: ParamStore) -> None:
    """Rescale any activation-mixture weights whose norm fell below the
    floor back up to it; keeps the normalization well defined."""
    for name, _ in store.layout:
        if name.startswith("aaf."):
            w = store.get(name)
            n = np.linalg.norm(w)
            if n < AAF_NORM_FLOOR:
                store.set(name, w * (AAF_NORM_FLOOR / n) if n > 0 else AAF_INIT)


class BoundParams:
    """A ParamStore exposed as leaf variables on one tape."""

    def __init__(self, tape: Tape, store: ParamStore):
        self.tape = tape
        self.store = store
        self.tv: Dict[str, TV] = {}
        self._leaf_ids: Dict[str, int] = {}
        for name, _ in store.layout:
            v = tape.variable(store.get(name))
            self.tv[name] = v
            self._leaf_ids[name] = v.i

    def grad_vector(self, grads: Dict[int, np.ndarray]) -> np.ndarray:
        """Assemble the flat gradient in store layout order."""
        out = np.zeros(self.store.size, dtype=np.float64)
        for name, _ in self.store.layout:
            g = grads.get(self._leaf_ids[name])
            if g is not None:
                out[self.store.slice_of(name)] = np.asarray(g).reshape(-1)
        return out


# The activation mixture is the innermost hot loop (five basis functions
# per hidden unit per layer), so it runs as one fused tape op with
# explicit first- and second-order rules instead of ~30 elementwise
# nodes. The shared cache dict memoizes basis values and derivatives
# across the forward value, the tangent slope, and both reverse rules.


def _aaf_cache(z: np.ndarray) -> dict:
    big_phi = norm_cdf(z)
    small_phi = norm_pdf(z)
    sig = expit(z)
    bases = (np.sin(z), np.tanh(z), z * big_phi, z * sig, np.logaddexp(0.0, z))
    return {"bases": bases, "Phi": big_phi, "phi": small_phi, "sig": sig}


def _aaf_derivs(aux: dict, z: np.ndarray):
    if "derivs" not in aux:
        b = aux["bases"]
        sig = aux["sig"]
        aux["derivs"] = (
            np.cos(z),
            1.0 - b[1] * b[1],
            aux["Phi"] + z * aux["phi"],
            sig * (1.0 + z * (1.0 - sig)),
            sig,
        )
    return aux["derivs"]


def _aaf_second_derivs(aux: dict, z: np.ndarray):
    if "second" not in aux:
        b = aux["bases"]
        sig = aux["sig"]
        sp = sig * (1.0 - sig)
        aux["second"] = (
            -b[0],
            -2.0 * b[1] * (1.0 - b[1] * b[1]),
            (2.0 - z * z) * aux["phi"],
            sp * (2.0 + z * (1.0 - 2.0 * sig)),
            sp,
        )
    return aux["second"]


def _wsum(w: np.ndarray, parts) -> np.ndarray:
    out = w[0] * parts[0]
    for i in range(1, 5):
        out += w[i] * parts[i]
    return out


def _aaf_value(aux: dict, pvals) -> np.ndarray:
    if aux is None:
        raise ConfigError("aaf ops require the basis cache as aux")
    _, w = pvals
    return _wsum(w, aux["bases"]) / np.linalg.norm(w)


def _aaf_vjp(node, g, pvals):
    z, w = pvals
    aux = node.aux
    nu = np.linalg.norm(w)
    dz = g * (_wsum(w, _aaf_derivs(aux, z)) / nu)
    b = aux["bases"]
    dw = np.array([np.sum(g * b[i]) for i in range(5)]) / nu
    dw -= (np.sum(g * node.value) / (nu * nu)) * w
    return [(0, dz, True), (1, dw, True)]


def _aafgrad_value(aux: dict, pvals) -> np.ndarray:
    z, w = pvals
    return _wsum(w, _aaf_derivs(aux, z)) / np.linalg.norm(w)


def _aafgrad_vjp(node, g, pvals):
    z, w = pvals
    aux = node.aux
    nu = np.linalg.norm(w)
    dz = g * (_wsum(w, _aaf_second_derivs(aux, z)) / nu)
    d = _aaf_derivs(aux, z)
    dw = np.array([np.sum(g * d[i]) for i in range(5)]) / nu
    dw -= (np.sum(g * node.value) / (nu * nu)) * w
    return [(0, dz, True), (1, dw, True)]


register_op("aaf", _aaf_value, _aaf_vjp)
register_op("aafgrad", _aafgrad_value, _aafgrad_vjp)


def _aaf_tv(z: TV, w: TV) -> TV:
    tape = z.tape
    cache = _aaf_cache(np.asarray(z.value))
    i = tape.record("aaf", (z.i, w.i), aux=cache)
    d = None
    if z.d is not None:
        slope = tape.record("aafgrad", (z.i, w.i), aux=cache)
        d = tape.record("mul", (slope, z.d))
    return TV(tape, i, d)


def _n_backbone(store: ParamStore) -> int:
    return sum(1 for name, _ in store.layout
               if name.startswith("backbone.") and name.endswith(".w"))


def _backbone(bp: BoundParams, h: TV, n_layers: int,
              rng: Optional[np.random.Generator], dropout: float) -> TV:
    for i in range(1, n_layers + 1):
        z = h @ bp.tv[f"backbone.{i}.w"] + bp.tv[f"backbone.{i}.b"]
        h = _aaf_tv(z, bp.tv[f"aaf.{i}"])
        if rng is not None and dropout > 0.0:
            keep = rng.random(np.shape(h.value)) >= dropout
            h = h * h.tape.constant(keep / (1.0 - dropout))
    return h


def _embed(bp: BoundParams, channels, x: Dict[str, TV], e: TV,
           gate_scale: float) -> TV:
    n = np.shape(x[channels[0]].value)[0]
    blocks = []
    for ch in channels:
        xi = x[ch].reshape((n, 1))
        blocks.append(xi * bp.tv[f"exp.{ch}.w"] + bp.tv[f"exp.{ch}.b"])
    gate = bp.tv["gate"]
    if gate_scale != 1.0:
        gate = gate * gate_scale
    h_sent = e @ bp.tv["sent.w"] + bp.tv["sent.b"]
    blocks.append(h_sent * gate)
    return concat(blocks)


def value_apply(
    bp: BoundParams,
    x: Dict[str, TV],
    e: TV,
    rng: Optional[np.random.Generator] = None,
    dropout: float = DROPOUT_RATE,
    gate_scale: float = 1.0,
) -> Tuple[TV, TV]:
    """Batched value-net forward; returns (call, put) head outputs.

    `x` maps each of t, x, k, tau, sigma, r to a (n,) tape variable and
    `e` is the (n, 5) sentiment block. Pass `rng` only while training;
    evaluation runs with dropout off.
    """
    h = _embed(bp, VALUE_CHANNELS, x, e, gate_scale)
    h = _backbone(bp, h, _n_backbone(bp.store), rng, dropout)
    u_call = h @ bp.tv["head.call.w"] + bp.tv["head.call.b"]
    u_put = h @ bp.tv["head.put.w"] + bp.tv["head.put.b"]
    return u_call, u_put


def generator_apply(
    bp: BoundParams,
    x: Dict[str, TV],
    e: TV,
    rng: Optional[np.random.Generator] = None,
    dropout: float = DROPOUT_RATE,
    gate_scale: float = 1.0,
) -> TV:
    """Batched generator forward over the eight financial channels."""
    h = _embed(bp, GEN_CHANNELS, x, e, gate_scale)
    h = _backbone(bp, h, _n_backbone(bp.store), rng, dropout)
    return h @ bp.tv["out.w"] + bp.tv["out.b"]


def _check_finite(values: Dict[str, float], e) -> None:
    for name, v in values.items():
        if not np.all(np.isfinite(v)):
            raise DataError(f"non-finite network input {name!r}: {v!r}")
    if not np.all(np.isfinite(e)):
        raise DataError("non-finite sentiment input")


def value_forward(store: ParamStore, t, x, k, tau, sigma, r, e, kind) -> float:
    """Single-point value-net price estimate for one option type."""
    if kind not in ("call", "put"):
        raise ConfigError(f"option kind must be 'call' or 'put', got {kind!r}")
    scalars = {"t": t, "x": x, "k": k, "tau": tau, "sigma": sigma, "r": r}
    _check_finite(scalars, e)
    tape = Tape()
    bp = BoundParams(tape, store)
    xs = {name: tape.constant(np.array([float(v)])) for name, v in scalars.items()}
    ev = tape.constant(np.asarray(e, dtype=np.float64).reshape(1, SENT_DIM))
    u_call, u_put = value_apply(bp, xs, ev, rng=None)
    return float((u_call if kind == "call" else u_put).value[0])


def generator_forward(store: ParamStore, t, x, y, z, k, tau, sigma, r, e) -> float:
    """Single-point generator evaluation."""
    scalars = {"t": t, "x": x, "y": y, "z": z, "k": k,
               "tau": tau, "sigma": sigma, "r": r}
    _check_finite(scalars, e)
    tape = Tape()
    bp = BoundParams(tape, store)
    xs = {name: tape.constant(np.array([float(v)])) for name, v in scalars.items()}
    ev = tape.constant(np.asarray(e, dtype=np.float64).reshape(1, SENT_DIM))
    return float(generator_apply(bp, xs, ev, rng=None).value[0])


# -- checkpoints ---------------------------------------------------------

_CKPT_MAGIC = b"FBSDE-CKPT\n"
_CKPT_VERSION = 1


def save_checkpoint(path, stores: Dict[str, ParamStore], meta: Optional[dict] = None) -> None:
    """Versioned binary dump with named sections; round-trips bitwise.

    The header is a single JSON line describing every section in layout
    order, followed by the raw little-endian float64 bytes.
    """
    sections = []
    payload = bytearray()
    for group in sorted(stores):
        store = stores[group]
        for name, shape in store.layout:
            arr = np.ascontiguousarray(store.get(name), dtype="<f8")
            sections.append({
                "name": f"{group}/{name}",
                "shape": list(shape),
                "offset": len(payload),
            })
            payload.extend(arr.tobytes())
    header = {
        "version": _CKPT_VERSION,
        "meta": meta or {},
        "sections": sections,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n"
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(blob)
        fh.write(bytes(payload))


def load_checkpoint(path) -> Tuple[Dict[str, ParamStore], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        header = json.loads(fh.readline().decode())
        if header.get("version") != _CKPT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {header.get('version')}")
        payload = fh.read()

    grouped: Dict[str, List[Tuple[str, Tuple[int, ...], np.ndarray]]] = {}
    for sec in header["sections"]:
        group, name = sec["name"].split("/", 1)
        shape = tuple(sec["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=n,
                            offset=sec["offset"]).reshape(shape)
        grouped.setdefault(group, []).append((name, shape, arr))

    stores: Dict[str, ParamStore] = {}
    for group, entries in grouped.items():
        store = ParamStore([(name, shape) for name, shape, _ in entries])
        for name, _, arr in entries:
            store.set(name, arr)
        stores[group] = store
    return stores, header["meta"]
