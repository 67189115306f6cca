"""Eight-stage channel-autoregressive occupancy coding of one octree level.

A parent voxel's 8 possible children map one-to-one onto 8 feature channels.
Channel values are +1 (decoded occupied), -1 (decoded empty), 0 (not decoded
yet); the channel for stage k is filled in after its bit is coded, so the
coordinate set never changes while a level is processed. Levels with at most
two octree splits carry too few voxels for a network and are always coded
with the fixed uniform model.
"""

from __future__ import annotations

import numpy as np

from .errors import AlignmentError, IncompleteStateError, RangeError, ShapeError
from .entropy import RangeDecoder, RangeEncoder, quantize_prob
from .geometry import LevelSlice, child_offsets
from .nn import (Adam, ParamStore, Tape, Var, bce_logits_bits, conv_layer, decayed_lr,
                 dfa_forward, head_forward, stable_sigmoid)
from .sparse import SparseTensor

STAGES = 8
UNIFORM_P16 = 1 << 15
# Levels 1 and 2 (up to 8 and 64 voxels) always use the uniform model.
MIN_MODEL_LEVEL = 3


class StagewiseModel:
    """Shared embedding + shared DFA, then per-stage DFA and sigmoid head."""

    def __init__(self, store: ParamStore, channels: int, kernel: int, share_head: bool = False):
        self.store = store
        self.channels = channels
        self.kernel = kernel
        self.share_head = share_head
        self._build()

    @classmethod
    def create(cls, channels: int = 32, kernel: int = 3, share_head: bool = False,
               seed: int = 0, dtype=np.float32) -> "StagewiseModel":
        return cls(ParamStore(dtype=dtype, seed=seed), channels, kernel, share_head)

    @classmethod
    def from_store(cls, store: ParamStore) -> "StagewiseModel":
        embed = store.arrays[store.resolve("sw/embed/w")]
        stage_in = store.arrays[store.resolve("sw/stage_dfa/in/w")]
        channels = embed.shape[-1]
        kernel = round(stage_in.shape[1] ** (1.0 / 3.0))
        share_head = store.arrays[store.resolve("sw/head/out/w")].ndim == 3
        return cls(store, channels, kernel, share_head)

    def _build(self):
        # One dummy batched forward materializes every parameter up front so
        # freshly created and checkpoint-loaded models share array layouts.
        st = SparseTensor(np.zeros((1, 3), dtype=np.int64), 1)
        feats = np.zeros((STAGES, 1, STAGES), dtype=self.store.dtype)
        self.forward(Tape(), st, feats)

    def forward(self, tape: Tape, st: SparseTensor, feats, stage: int | None = None) -> Var:
        """Logits for one stage (feats (N, 8)) or all stages batched (8, N, 8)."""
        store = self.store
        x = Var(np.asarray(feats, dtype=store.dtype))
        if x.value.shape[-1] != STAGES:
            raise ShapeError(f"stage state must have 8 channels, got {x.value.shape[-1]}")
        h = conv_layer(tape, store, st, x, "sw/embed", STAGES, self.channels, 1)
        h = dfa_forward(tape, store, st, h, "sw/dfa", self.channels, self.kernel)
        h = dfa_forward(tape, store, st, h, "sw/stage_dfa", self.channels, self.kernel,
                        stages=STAGES, stage=stage)
        head_stages = None if self.share_head else STAGES
        head_stage = None if self.share_head else stage
        _, logits = head_forward(tape, store, st, h, "sw/head", self.channels, 1,
                                 stages=head_stages, stage=head_stage)
        return logits

    def stage_probs(self, st: SparseTensor, state: np.ndarray, stage: int) -> np.ndarray:
        """Occupancy probability of sub-voxel ``stage`` per parent, float64."""
        logits = self.forward(Tape(), st, state, stage=stage)
        return stable_sigmoid(logits.value[..., 0])


def teacher_state(occupancy: np.ndarray, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Per-stage input states and target bits for one level slice.

    Returns (states (8, N, 8), bits (8, N)); states[k] holds the ground-truth
    +1/-1 channels for stages < k and zeros elsewhere, exactly what the
    decoder will have seen before predicting stage k.
    """
    bits = ((occupancy[:, None] >> np.arange(STAGES)) & 1).astype(dtype)
    signed = np.where(bits > 0, 1.0, -1.0).astype(dtype)
    states = np.zeros((STAGES, len(occupancy), STAGES), dtype=dtype)
    for k in range(1, STAGES):
        states[k, :, :k] = signed[:, :k]
    return states, bits.T.copy()


def feature_to_point(parent_coords: np.ndarray, state: np.ndarray) -> np.ndarray:
    """Turn a fully decoded +1/-1 channel state into child coordinates."""
    if state.shape != (len(parent_coords), STAGES):
        raise ShapeError(f"state must be (N, 8), got {state.shape}")
    if np.any(state == 0):
        raise IncompleteStateError("state still has undecoded channels")
    occupied = state > 0
    parents = np.repeat(parent_coords * 2, STAGES, axis=0)
    children = parents + np.tile(child_offsets(), (len(parent_coords), 1))
    return children[occupied.reshape(-1)]


def _stage_p16(model, st, state, stage, n):
    if model is None:
        return np.full(n, UNIFORM_P16, dtype=np.int64)
    return quantize_prob(model.stage_probs(st, state, stage))


def encode_level(slice_: LevelSlice, model: StagewiseModel | None, enc: RangeEncoder,
                 trace=None, stage_hook=None) -> np.ndarray:
    """Code one level's occupancy bits stage by stage; returns child coords."""
    parents = slice_.parent_coords
    n = len(parents)
    occ = slice_.occupancy
    use_model = model is not None and slice_.level >= MIN_MODEL_LEVEL
    st = SparseTensor(parents, max(slice_.level - 1, 1)) if use_model else None
    state = np.zeros((n, STAGES), dtype=model.store.dtype if use_model else np.float32)
    for k in range(STAGES):
        bits = (occ >> k) & 1
        p16 = _stage_p16(model if use_model else None, st, state, k, n)
        enc.encode_bits(p16, bits)
        state[:, k] = np.where(bits > 0, 1.0, -1.0)
        if trace is not None:
            trace.append(p16)
        if stage_hook is not None:
            stage_hook(k, parents, state)
    return slice_.expand()


def decode_level(parent_coords: np.ndarray, level: int, model: StagewiseModel | None,
                 dec: RangeDecoder, trace=None, stage_hook=None) -> np.ndarray:
    """Inverse of encode_level given the same parents, model, and stream."""
    n = len(parent_coords)
    use_model = model is not None and level >= MIN_MODEL_LEVEL
    st = SparseTensor(parent_coords, max(level - 1, 1)) if use_model else None
    state = np.zeros((n, STAGES), dtype=model.store.dtype if use_model else np.float32)
    for k in range(STAGES):
        p16 = _stage_p16(model if use_model else None, st, state, k, n)
        bits = dec.decode_bits(p16)
        state[:, k] = np.where(bits > 0, 1.0, -1.0)
        if trace is not None:
            trace.append(p16)
        if stage_hook is not None:
            stage_hook(k, parent_coords, state)
    return feature_to_point(parent_coords, state)


def stage_update(state: np.ndarray, stage: int, bits: np.ndarray) -> np.ndarray:
    """Write one stage's decoded bits into the channel state (+1/-1)."""
    if len(bits) != len(state):
        raise AlignmentError(f"{len(bits)} bits for {len(state)} parents")
    if not 0 <= stage < STAGES:
        raise RangeError(f"stage must be in [0, 8), got {stage}")
    out = state.copy()
    out[:, stage] = np.where(np.asarray(bits) > 0, 1.0, -1.0)
    return out


# ------------------------------------------------------------------ training

def level_training_samples(slices: list[LevelSlice], dtype=np.float32,
                           min_level: int = MIN_MODEL_LEVEL):
    """(SparseTensor, states, bits) triples for every network-coded level."""
    samples = []
    for s in slices:
        if s.level < min_level:
            continue
        st = SparseTensor(s.parent_coords, s.level - 1)
        states, bits = teacher_state(s.occupancy, dtype=dtype)
        samples.append((st, states, bits))
    return samples


def sample_loss(model: StagewiseModel, sample, accumulate: bool = True) -> float:
    st, states, bits = sample
    tape = Tape()
    logits = model.forward(tape, st, states)
    loss = bce_logits_bits(tape, logits, bits)
    if accumulate:
        tape.backward(loss, model.store)
    return loss.value


def train_stagewise(model: StagewiseModel, clouds: list[np.ndarray], depth: int,
                    epochs: int, lr_start: float = 8e-4, lr_end: float = 2e-5,
                    seed: int = 0, levels_per_cloud: int | None = None) -> list[float]:
    """SGD over per-level samples; returns mean loss (bits/bit) per epoch."""
    from .geometry import build_levels

    rng = np.random.default_rng(seed)
    per_cloud = [level_training_samples(build_levels(c, depth), dtype=model.store.dtype)
                 for c in clouds]
    per_cloud = [s for s in per_cloud if s]
    opt = Adam(model.store)
    picks = levels_per_cloud
    steps_per_epoch = sum(min(picks, len(s)) if picks else len(s) for s in per_cloud)
    total_steps = max(epochs * steps_per_epoch, 1)
    history = []
    step = 0
    for _ in range(epochs):
        batch = []
        for samples in per_cloud:
            if picks and len(samples) > picks:
                batch.extend(samples[i] for i in rng.choice(len(samples), size=picks, replace=False))
            else:
                batch.extend(samples)
        rng.shuffle(batch)
        total_bits = 0.0
        total_syms = 0
        for sample in batch:
            model.store.zero_grads()
            loss = sample_loss(model, sample)
            opt.step(decayed_lr(lr_start, lr_end, step, total_steps))
            step += 1
            total_bits += loss
            total_syms += sample[2].size
        history.append(total_bits / max(total_syms, 1))
    return history


def stage_marginals(slices_list: list[list[LevelSlice]], depth: int) -> np.ndarray:
    """Per-(level, stage) empirical frequency of the occupied bit, (depth, 8)."""
    ones = np.zeros((depth, STAGES), dtype=np.float64)
    count = np.zeros(depth, dtype=np.float64)
    for slices in slices_list:
        for s in slices:
            bits = (s.occupancy[:, None] >> np.arange(STAGES)) & 1
            ones[s.level - 1] += bits.sum(axis=0)
            count[s.level - 1] += len(s.occupancy)
    p = ones / np.maximum(count, 1.0)[:, None]
    p[count == 0] = 0.5
    return p


def marginal_baseline_bits(slices: list[LevelSlice], marginals: np.ndarray) -> float:
    """Bits a context-free coder with fixed per-(level, stage) frequencies needs."""
    p = np.clip(marginals, 1.0 / 65536.0, 1.0 - 1.0 / 65536.0)
    total = 0.0
    for s in slices:
        bits = (s.occupancy[:, None] >> np.arange(STAGES)) & 1
        row = p[s.level - 1]
        total += float(-(bits * np.log2(row) + (1 - bits) * np.log2(1 - row)).sum())
    return total
