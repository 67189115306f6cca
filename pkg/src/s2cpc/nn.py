"""Network blocks with hand-written backward passes on a replay tape.

There is no general autodiff here: each op records one closure, and
``Tape.backward`` replays them in reverse. Parameters live in a
``ParamStore`` keyed by path strings; stage-stacked layers keep one array
with a leading stage axis so training can run all 8 stages as a batch while
coding slices out a single stage.

Losses are measured in bits (log base 2) so a training loss per point is
directly comparable to a coded bits-per-point figure.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from .errors import ConfigError, ShapeError, TrainingError
from .sparse import SparseTensor, sparse_conv_backward, sparse_conv_forward

LN2 = float(np.log(2.0))


class Var:
    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = value
        self.grad = None

    def add_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.value) if isinstance(self.value, np.ndarray) else 0.0
        self.grad = self.grad + g


class Tape:
    def __init__(self):
        self._ops: list = []
        self._param_vars: dict[str, Var] = {}

    def record(self, back_fn):
        self._ops.append(back_fn)

    def param(self, store: "ParamStore", path: str, shape=None, fan=None) -> Var:
        resolved = store.ensure(path, shape, fan) if shape is not None else store.resolve(path)
        v = self._param_vars.get(resolved)
        if v is None:
            v = Var(store.arrays[resolved])
            self._param_vars[resolved] = v
        return v

    def backward(self, loss: Var, store: "ParamStore | None" = None):
        loss.grad = 1.0
        for fn in reversed(self._ops):
            fn()
        if store is not None:
            for resolved, v in self._param_vars.items():
                if v.grad is not None:
                    store.grads[resolved] += v.grad


# ---------------------------------------------------------------- basic ops

def conv(tape, st: SparseTensor, x: Var, w: Var, b: Var, kernel: int, dilation: int = 1) -> Var:
    out = Var(sparse_conv_forward(st, x.value, w.value, b.value, kernel, dilation))

    def back():
        if out.grad is None:
            return
        gx, gw, gb = sparse_conv_backward(st, x.value, w.value, out.grad, kernel, dilation)
        x.add_grad(gx)
        w.add_grad(gw)
        b.add_grad(gb)

    tape.record(back)
    return out


def relu(tape, x: Var) -> Var:
    mask = x.value > 0
    out = Var(np.where(mask, x.value, 0))

    def back():
        if out.grad is not None:
            x.add_grad(np.where(mask, out.grad, 0))

    tape.record(back)
    return out


def add(tape, a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add operands differ: {a.value.shape} vs {b.value.shape}")
    out = Var(a.value + b.value)

    def back():
        if out.grad is not None:
            a.add_grad(out.grad)
            b.add_grad(out.grad)

    tape.record(back)
    return out


def concat(tape, parts: list[Var]) -> Var:
    rows = {p.value.shape[:-1] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat operands disagree on row shape: {rows}")
    sizes = [p.value.shape[-1] for p in parts]
    out = Var(np.concatenate([p.value for p in parts], axis=-1))

    def back():
        if out.grad is None:
            return
        start = 0
        for p, c in zip(parts, sizes):
            p.add_grad(out.grad[..., start:start + c])
            start += c

    tape.record(back)
    return out


def take_rows(tape, x: Var, idx: np.ndarray) -> Var:
    """Gather rows along the voxel axis; idx must be strictly increasing."""
    out = Var(x.value[..., idx, :])

    def back():
        if out.grad is None:
            return
        g = np.zeros_like(x.value)
        g[..., idx, :] = out.grad
        x.add_grad(g)

    tape.record(back)
    return out


def replace_rows(tape, x: Var, idx: np.ndarray, rows: Var) -> Var:
    if rows.value.shape != x.value[..., idx, :].shape:
        raise ShapeError("replacement rows have the wrong shape")
    value = x.value.copy()
    value[..., idx, :] = rows.value
    out = Var(value)

    def back():
        if out.grad is None:
            return
        gx = out.grad.copy()
        gx[..., idx, :] = 0
        x.add_grad(gx)
        rows.add_grad(out.grad[..., idx, :])

    tape.record(back)
    return out


def index0(tape, x: Var, k: int) -> Var:
    """Slice one entry off the leading (stage) axis of a stacked parameter."""
    out = Var(x.value[k])

    def back():
        if out.grad is None:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.value)
        x.grad[k] += out.grad

    tape.record(back)
    return out


def add_scalars(tape, terms: list[Var]) -> Var:
    out = Var(float(sum(t.value for t in terms)))

    def back():
        if out.grad is not None:
            for t in terms:
                t.add_grad(out.grad)

    tape.record(back)
    return out


# ------------------------------------------------------------------- losses

def stable_sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax_probs(z):
    z = np.asarray(z, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def bce_logits_bits(tape, logits: Var, targets) -> Var:
    """Total binary cross entropy in bits; targets in {0,1} aligned with logits."""
    z = logits.value
    if z.shape[-1] == 1:
        z = z[..., 0]
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != z.shape:
        raise ShapeError(f"targets shape {t.shape} != logits shape {z.shape}")
    z64 = np.asarray(z, dtype=np.float64)
    out = Var(float((np.logaddexp(0.0, z64) - t * z64).sum() / LN2))

    def back():
        if out.grad is None:
            return
        g = (stable_sigmoid(z64) - t) * (out.grad / LN2)
        g = g.astype(logits.value.dtype)
        logits.add_grad(g.reshape(logits.value.shape))

    tape.record(back)
    return out


def ce_logits_bits(tape, logits: Var, targets) -> Var:
    """Total categorical cross entropy in bits; integer targets over the last axis."""
    z64 = np.asarray(logits.value, dtype=np.float64)
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != z64.shape[:-1]:
        raise ShapeError(f"targets shape {t.shape} != logits rows {z64.shape[:-1]}")
    m = z64.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(z64 - m).sum(axis=-1))
    picked = np.take_along_axis(z64, t[..., None], axis=-1)[..., 0]
    out = Var(float((lse - picked).sum() / LN2))

    def back():
        if out.grad is None:
            return
        g = softmax_probs(z64)
        np.put_along_axis(g, t[..., None], np.take_along_axis(g, t[..., None], axis=-1) - 1.0, axis=-1)
        logits.add_grad((g * (out.grad / LN2)).astype(logits.value.dtype))

    tape.record(back)
    return out


# ------------------------------------------------------------------- params

class ParamStore:
    """Arrays by path, grads alongside, plus an alias table for shared layers."""

    def __init__(self, dtype=np.float32, seed: int = 0):
        self.dtype = np.dtype(dtype)
        self.arrays: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.aliases: dict[str, str] = {}
        self._rng = np.random.default_rng(seed)

    def resolve(self, path: str) -> str:
        seen = set()
        while path in self.aliases:
            if path in seen:
                raise ConfigError(f"alias cycle at {path}")
            seen.add(path)
            path = self.aliases[path]
        return path

    def alias(self, path: str, target: str):
        if path == target:
            raise ConfigError("alias to itself")
        if path in self.arrays:
            raise ConfigError(f"{path} already has storage")
        if path in self.aliases:
            raise ConfigError(f"{path} is already an alias")
        self.aliases[path] = target

    def ensure(self, path: str, shape, fan=None) -> str:
        resolved = self.resolve(path)
        shape = tuple(shape)
        if resolved in self.arrays:
            if self.arrays[resolved].shape != shape:
                raise ShapeError(f"{resolved} exists with shape {self.arrays[resolved].shape}, wanted {shape}")
            return resolved
        if fan is None:
            arr = np.zeros(shape, dtype=self.dtype)
        else:
            fan_in, fan_out = fan
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            arr = self._rng.uniform(-limit, limit, size=shape).astype(self.dtype)
        self.arrays[resolved] = arr
        self.grads[resolved] = np.zeros(shape, dtype=self.dtype)
        return resolved

    def zero_grads(self):
        for g in self.grads.values():
            g[...] = 0

    def num_params(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))


class Adam:
    def __init__(self, store: ParamStore, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.store = store
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def step(self, lr: float):
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self._t
        c2 = 1.0 - b2 ** self._t
        for path in sorted(self.store.arrays):
            g = self.store.grads[path]
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient at {path}")
            m = self._m.setdefault(path, np.zeros_like(g))
            v = self._v.setdefault(path, np.zeros_like(g))
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            arr = self.store.arrays[path]
            if self.weight_decay:
                # Decoupled decay: applied to the weights, not the moments.
                arr -= lr * self.weight_decay * arr
            arr -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


def decayed_lr(lr_start: float, lr_end: float, step: int, total_steps: int) -> float:
    """Exponential interpolation from lr_start (step 0) to lr_end (last step)."""
    if total_steps <= 1:
        return lr_start
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    return float(lr_start * (lr_end / lr_start) ** frac)


# -------------------------------------------------------------------- blocks

def conv_layer(tape, store, st, x, prefix, cin, cout, kernel, dilation=1, stages=None, stage=None):
    k3 = kernel ** 3
    if stages is None:
        w = tape.param(store, prefix + "/w", (k3, cin, cout), fan=(cin * k3, cout * k3))
        b = tape.param(store, prefix + "/b", (cout,), fan=None)
    else:
        w = tape.param(store, prefix + "/w", (stages, k3, cin, cout), fan=(cin * k3, cout * k3))
        b = tape.param(store, prefix + "/b", (stages, cout), fan=None)
        if stage is not None:
            w = index0(tape, w, stage)
            b = index0(tape, b, stage)
    return conv(tape, st, x, w, b, kernel, dilation)


def irn_forward(tape, store, st, x, prefix, channels, kernel, dilation=1, stages=None, stage=None):
    """Inception-style residual unit: three parallel branches re-concatenated to C."""
    if channels % 4:
        raise ConfigError(f"channel width must be divisible by 4, got {channels}")
    c2, c4 = channels // 2, channels // 4
    args = dict(stages=stages, stage=stage)
    b1 = conv_layer(tape, store, st, x, prefix + "/b1", channels, c2, 1, **args)
    b2 = conv_layer(tape, store, st, x, prefix + "/b2", channels, c4, kernel, dilation, **args)
    h = relu(tape, conv_layer(tape, store, st, x, prefix + "/b3a", channels, c4, kernel, dilation, **args))
    b3 = conv_layer(tape, store, st, h, prefix + "/b3b", c4, c4, kernel, dilation, **args)
    return add(tape, x, concat(tape, [b1, b2, b3]))


def dfa_forward(tape, store, st, x, prefix, channels, kernel, dilations=(1, 1, 1), stages=None, stage=None):
    """conv -> ReLU -> 3 IRN units -> conv, all width C."""
    h = relu(tape, conv_layer(tape, store, st, x, prefix + "/in", channels, channels, kernel,
                              stages=stages, stage=stage))
    for i, d in enumerate(dilations):
        h = irn_forward(tape, store, st, h, f"{prefix}/irn{i}", channels, kernel, d,
                        stages=stages, stage=stage)
    return conv_layer(tape, store, st, h, prefix + "/out", channels, channels, kernel,
                      stages=stages, stage=stage)


def l_dfa_forward(tape, store, st, x, prefix, channels, kernel, stages=None, stage=None):
    """DFA variant with a large kernel and staggered IRN dilations (1, 2, 3)."""
    return dfa_forward(tape, store, st, x, prefix, channels, kernel, dilations=(1, 2, 3),
                       stages=stages, stage=stage)


def head_forward(tape, store, st, x, prefix, channels, out_channels, stages=None, stage=None):
    """Three kernel-1 convs with ReLUs between; returns (last hidden, logits)."""
    h = relu(tape, conv_layer(tape, store, st, x, prefix + "/h0", channels, channels, 1,
                              stages=stages, stage=stage))
    f1 = relu(tape, conv_layer(tape, store, st, h, prefix + "/h1", channels, channels, 1,
                               stages=stages, stage=stage))
    logits = conv_layer(tape, store, st, f1, prefix + "/out", channels, out_channels, 1,
                        stages=stages, stage=stage)
    return f1, logits


# -------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"S2CW"


def serialize_params(store: ParamStore) -> bytes:
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<B", 1)
    paths = sorted(store.arrays)
    out += struct.pack("<I", len(paths))
    for path in paths:
        raw = path.encode("utf-8")
        arr = store.arrays[path]
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    aliases = sorted(store.aliases.items())
    out += struct.pack("<I", len(aliases))
    for path, target in aliases:
        for s in (path, target):
            raw = s.encode("utf-8")
            out += struct.pack("<H", len(raw)) + raw
    return bytes(out)


def deserialize_params(data: bytes, dtype=np.float32) -> ParamStore:
    from .errors import StreamCorruptError

    if data[:4] != CHECKPOINT_MAGIC:
        raise StreamCorruptError("bad checkpoint magic")
    if data[4] != 1:
        raise StreamCorruptError(f"unsupported checkpoint version {data[4]}")
    store = ParamStore(dtype=dtype)
    pos = 5

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise StreamCorruptError("checkpoint truncated")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    def take_str():
        (ln,) = struct.unpack("<H", take(2))
        return take(ln).decode("utf-8")

    (count,) = struct.unpack("<I", take(4))
    for _ in range(count):
        path = take_str()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(store.dtype)
        store.arrays[path] = arr.copy()
        store.grads[path] = np.zeros(shape, dtype=store.dtype)
    (acount,) = struct.unpack("<I", take(4))
    for _ in range(acount):
        path = take_str()
        target = take_str()
        store.aliases[path] = target
    if pos != len(data):
        raise StreamCorruptError("trailing bytes after checkpoint payload")
    return store


def params_digest(data: bytes) -> int:
    """64-bit identity of a serialized checkpoint (0 is reserved for 'no model')."""
    (value,) = struct.unpack("<Q", hashlib.sha256(data).digest()[:8])
    return value or 1


def write_checkpoint(store: ParamStore, path) -> int:
    data = serialize_params(store)
    with open(path, "wb") as fh:
        fh.write(data)
    return params_digest(data)


def read_checkpoint(path, dtype=np.float32) -> tuple[ParamStore, int]:
    with open(path, "rb") as fh:
        data = fh.read()
    return deserialize_params(data, dtype=dtype), params_digest(data)


# ------------------------------------------------------------ gradient check

def finite_difference_check(store: ParamStore, loss_fn, rng=None, entries_per_array: int = 4,
                            h_scale: float = 1e-5, zero_floor: float = 1e-8) -> float:
    """Worst relative error between analytic gradients and central differences.

    ``loss_fn(store)`` must run a fresh forward/backward (accumulating into
    ``store.grads``) and return the scalar loss. Entries are sampled per
    array; near-zero analytic/numeric pairs below ``zero_floor`` are skipped
    since their ratio is noise.
    """
    rng = rng or np.random.default_rng(0)
    store.zero_grads()
    loss_fn(store)
    analytic = {p: g.copy() for p, g in store.grads.items()}
    worst = 0.0
    for path in sorted(store.arrays):
        arr = store.arrays[path]
        n = arr.size
        idxs = range(n) if n <= entries_per_array else rng.choice(n, size=entries_per_array, replace=False)
        for idx in idxs:
            old = arr.flat[idx]
            h = h_scale * max(1.0, abs(float(old)))
            arr.flat[idx] = old + h
            store.zero_grads()
            lp = loss_fn(store)
            arr.flat[idx] = old - h
            store.zero_grads()
            lm = loss_fn(store)
            arr.flat[idx] = old
            fd = (lp - lm) / (2.0 * h)
            a = float(analytic[path].flat[idx])
            denom = max(abs(a), abs(fd))
            if denom < zero_floor:
                continue
            worst = max(worst, abs(a - fd) / denom)
    store.zero_grads()
    return worst
