"""Small dense-network engine: MLP forward/backward, Adam, EMA, seeded streams.

Everything is float64 numpy. Inputs may be a single vector or a batch of rows;
gradients returned by :func:`backward` are summed over the batch, so callers
scale ``output_grad`` by ``1 / batch`` when they want a mean loss.
"""
from __future__ import annotations

import io
import json
import os
import struct
import zlib
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")


class ShapeError(ValueError):
    """Input or parameter shapes disagree with the network spec."""


class StaleTapeError(ValueError):
    """A tape was replayed against parameters it was not recorded with."""


class NonFiniteError(FloatingPointError):
    """A loss or gradient was NaN/Inf; the update was not applied."""


@dataclass(frozen=True)
class MLPSpec:
    layer_widths: tuple[int, ...]
    hidden_activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ShapeError(f"bad layer widths {widths}")
        if self.hidden_activation not in ("relu", "tanh"):
            raise ValueError(f"hidden activation {self.hidden_activation!r}")
        if self.output_activation not in ("identity", "tanh"):
            raise ValueError(f"output activation {self.output_activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def in_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def out_dim(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))

    def activation(self, layer: int) -> str:
        return self.output_activation if layer == self.n_layers - 1 else self.hidden_activation


class ParamSet(dict):
    """Ordered name -> float64 array map with a version counter.

    The version is bumped by every in-place update so that tapes recorded
    before an update are detected as stale.
    """

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.version = 0

    def copy(self) -> "ParamSet":
        return ParamSet((k, v.copy()) for k, v in self.items())

    def zeros_like(self) -> "ParamSet":
        return ParamSet((k, np.zeros_like(v)) for k, v in self.items())

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.values())

    def bump(self):
        self.version += 1


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``(seed, name)``.

    Streams with different names never share draws, so adding a consumer on
    one stream leaves every other stream untouched.
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & (2**63 - 1), key])))


def _orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q.reshape(n_in, n_out)


def init_params(spec: MLPSpec, rng: np.random.Generator) -> ParamSet:
    params = ParamSet()
    w = spec.layer_widths
    for i in range(spec.n_layers):
        gain = 5.0 / 3.0 if spec.activation(i) == "tanh" and i < spec.n_layers - 1 else 1.0
        params[f"W{i}"] = _orthogonal(rng, w[i], w[i + 1], gain)
        params[f"b{i}"] = np.zeros(w[i + 1])
    return params


def check_params(spec: MLPSpec, params: Mapping[str, np.ndarray]):
    w = spec.layer_widths
    for i in range(spec.n_layers):
        if params[f"W{i}"].shape != (w[i], w[i + 1]) or params[f"b{i}"].shape != (w[i + 1],):
            raise ShapeError(f"layer {i} shapes do not match {spec}")


@dataclass
class Tape:
    spec: MLPSpec
    params_id: int
    version: int
    activations: list  # input to each layer, then the final output
    squeeze: bool


def forward(spec: MLPSpec, params: ParamSet, x) -> tuple[np.ndarray, Tape]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.in_dim:
        raise ShapeError(f"expected input width {spec.in_dim}, got shape {x.shape}")
    acts = [x]
    h = x
    for i in range(spec.n_layers):
        h = h @ params[f"W{i}"] + params[f"b{i}"]
        act = spec.activation(i)
        if act == "relu":
            h = np.maximum(h, 0.0)
        elif act == "tanh":
            h = np.tanh(h)
        acts.append(h)
    tape = Tape(spec, id(params), getattr(params, "version", 0), acts, squeeze)
    return (h[0] if squeeze else h), tape


def backward(spec: MLPSpec, params: ParamSet, tape: Tape, output_grad, *, input_grad: bool = False,
             param_grads: bool = True):
    """Reverse-mode gradients of ``sum(output * output_grad)``.

    Returns the parameter gradients, or ``(grads, d_input)`` when
    ``input_grad`` is set. ``param_grads=False`` skips the weight gradients
    (returned as None) when only ``d_input`` is wanted.
    """
    if tape.spec != spec or tape.params_id != id(params) or tape.version != getattr(params, "version", 0):
        raise StaleTapeError("tape does not belong to these parameters")
    g = np.asarray(output_grad, dtype=np.float64)
    if tape.squeeze:
        g = g[None, :] if g.ndim == 1 else g
    acts = tape.activations
    if g.shape != acts[-1].shape:
        raise ShapeError(f"output grad shape {g.shape} != output shape {acts[-1].shape}")
    grads = ParamSet()
    for i in reversed(range(spec.n_layers)):
        out = acts[i + 1]
        act = spec.activation(i)
        if act == "relu":
            g = g * (out > 0.0)
        elif act == "tanh":
            g = g * (1.0 - out * out)
        if param_grads:
            grads[f"W{i}"] = acts[i].T @ g
            grads[f"b{i}"] = g.sum(axis=0)
        if i > 0 or input_grad:
            g = g @ params[f"W{i}"].T
    grads = ParamSet((k, grads[k]) for k in params) if param_grads else None
    if not input_grad:
        return grads
    return grads, (g[0] if tape.squeeze else g)


def add_grads(*gs: ParamSet) -> ParamSet:
    out = gs[0].copy()
    for g in gs[1:]:
        for k, v in g.items():
            out[k] += v
    return out


@dataclass
class AdamState:
    first_moment: ParamSet
    second_moment: ParamSet
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ParamSet, **kw) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), **kw)


def adam_step(params: ParamSet, grads: Mapping[str, np.ndarray], state: AdamState, lr: float):
    """In-place bias-corrected Adam. Raises NonFiniteError without touching anything."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {k}")
        if g.shape != params[k].shape:
            raise ShapeError(f"gradient {k} has shape {g.shape}, param {params[k].shape}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for k, g in grads.items():
        m = state.first_moment[k]
        v = state.second_moment[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    if isinstance(params, ParamSet):
        params.bump()
    return params, state


def ema_update(target: ParamSet, online: Mapping[str, np.ndarray], tau: float) -> ParamSet:
    """target <- tau * online + (1 - tau) * target, in place."""
    if set(target) != set(online) or any(target[k].shape != online[k].shape for k in target):
        raise ShapeError("EMA target and online parameters differ in shape")
    for k in target:
        target[k] *= 1.0 - tau
        target[k] += tau * online[k]
    if isinstance(target, ParamSet):
        target.bump()
    return target


class Net:
    """An MLP bundled with its parameters and Adam state."""

    def __init__(self, spec: MLPSpec, rng: np.random.Generator, lr: float = 1e-4):
        self.spec = spec
        self.params = init_params(spec, rng)
        self.opt = AdamState.zeros_like(self.params)
        self.lr = lr

    def __call__(self, x) -> np.ndarray:
        return forward(self.spec, self.params, x)[0]

    def forward(self, x):
        return forward(self.spec, self.params, x)

    def backward(self, tape: Tape, output_grad, input_grad: bool = False, param_grads: bool = True):
        return backward(self.spec, self.params, tape, output_grad, input_grad=input_grad,
                        param_grads=param_grads)

    def step(self, grads: ParamSet):
        adam_step(self.params, grads, self.opt, self.lr)

    def reset_optimizer(self):
        self.opt = AdamState.zeros_like(self.params)

    def load(self, params: Mapping[str, np.ndarray]):
        check_params(self.spec, params)
        for k in self.params:
            self.params[k][...] = params[k]
        self.params.bump()


def mlp(widths: Iterable[int], rng: np.random.Generator, lr: float = 1e-4,
        hidden: str = "relu", output: str = "identity") -> Net:
    return Net(MLPSpec(tuple(widths), hidden, output), rng, lr)


# --- container file -------------------------------------------------------
# Layout: MAGIC, u32 version, u32 meta length, meta JSON (sorted keys),
# u32 record count, then per record: u16 name length, name, u8 ndim,
# u64 dims..., float64 little-endian row-major values.

MAGIC = b"URLBPSET"
CONTAINER_VERSION = 1


def dump_container(meta: Mapping, arrays: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", CONTAINER_VERSION, len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def load_container(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    view = memoryview(data)
    if bytes(view[:8]) != MAGIC:
        raise ValueError("not a parameter container")
    version, meta_len = struct.unpack_from("<II", view, 8)
    if version != CONTAINER_VERSION:
        raise ValueError(f"unsupported container version {version}")
    pos = 16
    meta = json.loads(bytes(view[pos:pos + meta_len]).decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos:pos + nlen]).decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", view, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", view, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(view[pos:pos + 8 * n], dtype="<f8").reshape(shape).astype(np.float64)
        pos += 8 * n
    return meta, arrays


def write_atomic(path: str | os.PathLike, data: bytes):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
