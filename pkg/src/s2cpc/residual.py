"""Per-level residual coding past the saturation level.

Once an octree level has (almost) as many voxels as the cloud has points,
each voxel usually has exactly one occupied child, so a whole level costs one
8-way symbol per point. Those symbols (R = child index + 1) are stored as
extra feature columns on the fixed saturation-level coordinates instead of
growing the coordinate set. Voxels with more than one occupied child keep the
smallest-Morton child on the chain; every point descending from the other
children is written to the raw section verbatim.

Prediction uses a two-group network: the even-position half of the voxels is
coded from history alone, then its decoded symbols are fed back as context
for the odd half.
"""

from __future__ import annotations

import numpy as np

from .errors import RangeError, ShapeError, SymbolError
from .entropy import RangeDecoder, RangeEncoder, quantize_cdf
from .geometry import morton_decode, morton_encode, validate_coords
from .nn import (Adam, ParamStore, Tape, Var, add_scalars, ce_logits_bits, concat,
                 conv_layer, decayed_lr, head_forward, l_dfa_forward, replace_rows,
                 softmax_probs, take_rows)
from .sparse import SparseTensor

UNIFORM_FREQ = 1 << 13  # 8192 = 65536 / 8


def binarize_residual(r) -> np.ndarray:
    """Bits (r1, r2, r3) of R - 1, most significant first (x, y, z)."""
    r = np.asarray(r, dtype=np.int64)
    if r.size and (r.min() < 1 or r.max() > 8):
        raise SymbolError("residual symbols must be in 1..8")
    v = r - 1
    return np.stack([(v >> 2) & 1, (v >> 1) & 1, v & 1], axis=-1)


def residual_from_bits(bits) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.int64)
    return (bits[..., 0] << 2 | bits[..., 1] << 1 | bits[..., 2]) + 1


def reconstruct_coords(base: np.ndarray, residuals: np.ndarray) -> np.ndarray:
    """Apply m residual columns to level-j coordinates: each step descends one level."""
    base = np.asarray(base, dtype=np.int64)
    residuals = np.asarray(residuals, dtype=np.int64)
    if residuals.ndim != 2 or len(residuals) != len(base):
        raise ShapeError(f"residuals must be (N, m) aligned with base, got {residuals.shape}")
    m = residuals.shape[1]
    out = base << m
    for n in range(1, m + 1):
        out += binarize_residual(residuals[:, n - 1]) << (m - n)
    return out


def extract_residual_levels(coords: np.ndarray, depth: int, start_level: int):
    """Split a cloud into (base coords, residual columns, raw extras).

    The chain for each base voxel follows the smallest Morton code in its
    subtree, which is exactly the first point of the voxel's group in
    canonical order. reconstruct_coords(base, residuals) and the extras
    partition the original coordinate set.
    """
    coords = validate_coords(coords, depth)
    if not 1 <= start_level <= depth:
        raise RangeError(f"start level {start_level} outside [1, {depth}]")
    m = depth - start_level
    codes = morton_encode(coords, depth)
    if len(codes) == 0:
        return coords, np.zeros((0, m), dtype=np.int64), coords
    prefix = codes >> (3 * m)
    leader = np.ones(len(codes), dtype=bool)
    leader[1:] = prefix[1:] != prefix[:-1]
    base = morton_decode(prefix[leader], start_level)
    leaf = codes[leader]
    residuals = np.empty((len(base), m), dtype=np.int64)
    for n in range(1, m + 1):
        residuals[:, n - 1] = ((leaf >> (3 * (m - n))) & 7) + 1
    extras = coords[~leader]
    return base, residuals, extras


def group_split(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Even canonical positions first, odd positions second."""
    idx = np.arange(n)
    return idx[0::2], idx[1::2]


def build_history(residuals: np.ndarray, step: int, window: int, dtype=np.float32) -> np.ndarray:
    """One-hot the last ``window`` decoded columns before ``step``, newest first.

    ``step`` is 1-based; column slots without a decoded level stay zero, so
    the first step always sees an all-zero history.
    """
    n = len(residuals)
    out = np.zeros((n, 8 * window), dtype=dtype)
    for slot in range(window):
        col = step - 1 - slot
        if col < 1:
            break
        sym = residuals[:, col - 1] - 1
        out[np.arange(n), slot * 8 + sym] = 1.0
    return out


class RpaModel:
    """Grouped residual predictor shared across all chain steps."""

    def __init__(self, store: ParamStore, channels: int, kernel: int, history: int):
        self.store = store
        self.channels = channels
        self.kernel = kernel
        self.history = history
        self._build()

    @classmethod
    def create(cls, channels: int = 32, kernel: int = 9, history: int = 6,
               seed: int = 0, dtype=np.float32) -> "RpaModel":
        return cls(ParamStore(dtype=dtype, seed=seed), channels, kernel, history)

    @classmethod
    def from_store(cls, store: ParamStore) -> "RpaModel":
        hist_w = store.arrays[store.resolve("rpa/hist/w")]
        ldfa_in = store.arrays[store.resolve("rpa/ldfa0/in/w")]
        channels = hist_w.shape[-1]
        history = hist_w.shape[-2] // 8
        kernel = round(ldfa_in.shape[0] ** (1.0 / 3.0))
        return cls(store, channels, kernel, history)

    def _build(self):
        st = SparseTensor(np.array([[0, 0, 0], [1, 1, 1]], dtype=np.int64), 1)
        g1, g2 = group_split(2)
        hist = np.zeros((2, 8 * self.history), dtype=self.store.dtype)
        tape = Tape()
        t0, st_g1, f1, _ = self.group1_logits(tape, st, g1, hist)
        onehot = np.zeros((1, 8), dtype=self.store.dtype)
        self.group2_logits(tape, st, st_g1, g1, g2, t0, f1, onehot)

    def group1_logits(self, tape: Tape, st: SparseTensor, g1: np.ndarray, hist_feats):
        """History -> T0 over all rows, then the group-1 branch; exposes F1."""
        store = self.store
        x = Var(np.asarray(hist_feats, dtype=store.dtype))
        if x.value.shape[-1] != 8 * self.history:
            raise ShapeError(f"history must have {8 * self.history} channels")
        h = conv_layer(tape, store, st, x, "rpa/hist", 8 * self.history, self.channels, 1)
        t0 = l_dfa_forward(tape, store, st, h, "rpa/ldfa0", self.channels, self.kernel)
        st_g1 = st.restrict(g1)
        u1 = l_dfa_forward(tape, store, st_g1, take_rows(tape, t0, g1),
                           "rpa/ldfa1", self.channels, self.kernel)
        f1, logits1 = head_forward(tape, store, st_g1, u1, "rpa/head", self.channels, 8)
        return t0, st_g1, f1, logits1

    def group2_logits(self, tape: Tape, st: SparseTensor, st_g1: SparseTensor,
                      g1: np.ndarray, g2: np.ndarray, t0: Var, f1: Var, onehot_g1):
        """Decoded group-1 symbols re-enter as one-hots; predicts group 2."""
        store = self.store
        oh = Var(np.asarray(onehot_g1, dtype=store.dtype))
        e = conv_layer(tape, store, st_g1, oh, "rpa/onehot", 8, self.channels, self.kernel)
        p = conv_layer(tape, store, st_g1, concat(tape, [e, f1]),
                       "rpa/proj", 2 * self.channels, self.channels, 1)
        t0p = replace_rows(tape, t0, g1, p)
        u2 = l_dfa_forward(tape, store, st, t0p, "rpa/ldfa2", self.channels, self.kernel)
        st_g2 = st.restrict(g2)
        _, logits2 = head_forward(tape, store, st_g2, take_rows(tape, u2, g2),
                                  "rpa/head", self.channels, 8)
        return logits2


def _onehot(symbols: np.ndarray, dtype) -> np.ndarray:
    out = np.zeros(symbols.shape + (8,), dtype=dtype)
    np.put_along_axis(out, (symbols - 1)[..., None], 1.0, axis=-1)
    return out


def _freqs_or_uniform(logits_value, n: int):
    if logits_value is None:
        return np.full((n, 8), UNIFORM_FREQ, dtype=np.int64)
    return quantize_cdf(softmax_probs(logits_value))


def encode_residuals(st: SparseTensor, residuals: np.ndarray, model: RpaModel | None,
                     enc: RangeEncoder, trace=None, step_hook=None):
    """Code (N, m) residual columns, two groups per step, group 1 first."""
    n, m = residuals.shape
    if residuals.size and (residuals.min() < 1 or residuals.max() > 8):
        raise SymbolError("residual symbols must be in 1..8")
    g1, g2 = group_split(n)
    dtype = model.store.dtype if model is not None else np.float32
    for step in range(1, m + 1):
        column = residuals[:, step - 1]
        if model is not None:
            hist = build_history(residuals, step, model.history, dtype=dtype)
            tape = Tape()
            t0, st_g1, f1, logits1 = model.group1_logits(tape, st, g1, hist)
            freqs1 = _freqs_or_uniform(logits1.value, len(g1))
        else:
            freqs1 = _freqs_or_uniform(None, len(g1))
        enc.encode_symbols(freqs1, column[g1] - 1)
        if trace is not None:
            trace.append(freqs1)
        if model is not None:
            onehot = _onehot(column[g1], dtype)
            logits2 = model.group2_logits(tape, st, st_g1, g1, g2, t0, f1, onehot)
            freqs2 = _freqs_or_uniform(logits2.value, len(g2))
        else:
            freqs2 = _freqs_or_uniform(None, len(g2))
        enc.encode_symbols(freqs2, column[g2] - 1)
        if trace is not None:
            trace.append(freqs2)
        if step_hook is not None:
            step_hook(step)


def decode_residuals(st: SparseTensor, m: int, model: RpaModel | None,
                     dec: RangeDecoder, trace=None, step_hook=None) -> np.ndarray:
    """Inverse of encode_residuals over the same coordinates and model."""
    n = len(st)
    g1, g2 = group_split(n)
    dtype = model.store.dtype if model is not None else np.float32
    residuals = np.zeros((n, m), dtype=np.int64)
    for step in range(1, m + 1):
        if model is not None:
            hist = build_history(residuals, step, model.history, dtype=dtype)
            tape = Tape()
            t0, st_g1, f1, logits1 = model.group1_logits(tape, st, g1, hist)
            freqs1 = _freqs_or_uniform(logits1.value, len(g1))
        else:
            freqs1 = _freqs_or_uniform(None, len(g1))
        sym1 = dec.decode_symbols(freqs1) + 1
        residuals[g1, step - 1] = sym1
        if trace is not None:
            trace.append(freqs1)
        if model is not None:
            logits2 = model.group2_logits(tape, st, st_g1, g1, g2, t0, f1, _onehot(sym1, dtype))
            freqs2 = _freqs_or_uniform(logits2.value, len(g2))
        else:
            freqs2 = _freqs_or_uniform(None, len(g2))
        residuals[g2, step - 1] = dec.decode_symbols(freqs2) + 1
        if trace is not None:
            trace.append(freqs2)
        if step_hook is not None:
            step_hook(step)
    return residuals


# ------------------------------------------------------------------ training

def chain_samples(clouds: list[np.ndarray], depth: int, start_level: int, model: RpaModel):
    """Precompute (st, groups, histories, targets, onehots) per cloud."""
    samples = []
    for coords in clouds:
        base, residuals, _ = extract_residual_levels(coords, depth, start_level)
        n, m = residuals.shape
        if n < 2 or m == 0:
            continue
        st = SparseTensor(base, start_level)
        g1, g2 = group_split(n)
        hists = np.stack([build_history(residuals, s, model.history, dtype=model.store.dtype)
                          for s in range(1, m + 1)])
        onehots = np.stack([_onehot(residuals[g1, s - 1], model.store.dtype)
                            for s in range(1, m + 1)])
        t1 = residuals[:, :].T[:, g1] - 1
        t2 = residuals[:, :].T[:, g2] - 1
        samples.append((st, g1, g2, hists, onehots, t1, t2))
    return samples


def grc_sample_loss(model: RpaModel, sample, accumulate: bool = True) -> float:
    st, g1, g2, hists, onehots, t1, t2 = sample
    tape = Tape()
    t0, st_g1, f1, logits1 = model.group1_logits(tape, st, g1, hists)
    logits2 = model.group2_logits(tape, st, st_g1, g1, g2, t0, f1, onehots)
    loss1 = ce_logits_bits(tape, logits1, t1)
    loss2 = ce_logits_bits(tape, logits2, t2)
    loss = add_scalars(tape, [loss1, loss2])
    if accumulate:
        tape.backward(loss, model.store)
    return loss.value


def train_grc(model: RpaModel, clouds: list[np.ndarray], depth: int, start_level: int,
              epochs: int, lr_start: float = 8e-4, lr_end: float = 2.5e-5,
              weight_decay: float = 1e-3, seed: int = 0) -> list[float]:
    """SGD over per-cloud chain batches; returns mean bits/symbol per epoch."""
    rng = np.random.default_rng(seed)
    samples = chain_samples(clouds, depth, start_level, model)
    if not samples:
        return []
    opt = Adam(model.store, weight_decay=weight_decay)
    total_steps = max(epochs * len(samples), 1)
    history = []
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(samples))
        total_bits = 0.0
        total_syms = 0
        for i in order:
            model.store.zero_grads()
            loss = grc_sample_loss(model, samples[i])
            opt.step(decayed_lr(lr_start, lr_end, step, total_steps))
            step += 1
            total_bits += loss
            total_syms += samples[i][5].size + samples[i][6].size
        history.append(total_bits / max(total_syms, 1))
    return history


def residual_marginals(residual_sets: list[np.ndarray], m: int) -> np.ndarray:
    """Per-step empirical distribution over the 8 symbols, shape (m, 8)."""
    counts = np.zeros((m, 8), dtype=np.float64)
    for residuals in residual_sets:
        for s in range(min(m, residuals.shape[1])):
            counts[s] += np.bincount(residuals[:, s] - 1, minlength=8)
    totals = counts.sum(axis=1, keepdims=True)
    totals[totals == 0] = 1.0
    return counts / totals


def marginal_residual_bits(residuals: np.ndarray, marginals: np.ndarray) -> float:
    """Bits a context-free per-step coder with fixed frequencies would need."""
    p = np.clip(marginals, 1.0 / 65536.0, 1.0)
    total = 0.0
    for s in range(residuals.shape[1]):
        total += float(-np.log2(p[s][residuals[:, s] - 1]).sum())
    return total
