"""Toy streaming speech encoder.

Consumes 10 ms raw frames, stacks P consecutive frames into one step with a
linear projection, then runs a small transformer over the steps. Three modes:

- ``bidi``: full-context bidirectional encoding (optionally windowed).
- ``bidi_recompute``: re-encode the whole available prefix after each new
  block; states at least ``right_context_frames`` steps from the prefix end
  count as finalized.
- ``causal``: bounded left/right attention windows per layer, enabling exact
  incremental encoding with a per-layer cache.

Attention windows are realized as masks, which is what makes finalization
and incremental/batch equivalence exactly testable.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, no_grad
from .layers import (
    LayerNormParams,
    TransformerBlock,
    full_mask,
    positional_encoding,
    window_mask,
)

MODES = ("bidi", "bidi_recompute", "causal")


@dataclass
class SpeechUtterance:
    frames: np.ndarray  # [T_raw, d_in]
    frame_period_ms: int = 10

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be [T_raw >= 1, d_in], got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("frames contain non-finite values")


@dataclass
class EncoderOutput:
    states: np.ndarray  # [T_enc, d_model]
    P: int

    @property
    def stride_ms(self):
        return self.P * 10

    def __len__(self):
        return self.states.shape[0]


@dataclass
class EncoderConfig:
    mode: str = "bidi"
    P: int = 8
    n_layers: int = 2
    d_model: int = 64
    d_in: int = 16
    n_heads: int = 4
    d_ff: int = 128
    right_context_frames: int = 13  # encoder steps, not raw frames
    causal_context_windows: tuple = ((70, 13), (70, 6), (70, 1), (70, 0))
    causal_window_index: int = 3
    bidi_window_left: int | None = None  # None = unbounded bidirectional attention
    max_steps: int = 4096  # positional table length

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.P < 1:
            raise ValueError("P must be >= 1")
        if self.right_context_frames < 0:
            raise ValueError("right_context_frames must be >= 0")
        self.causal_context_windows = tuple(tuple(w) for w in self.causal_context_windows)
        for left, right in self.causal_context_windows:
            if left < 0 or right < 0:
                raise ValueError(f"context window ({left}, {right}) must be nonnegative")
        if not 0 <= self.causal_window_index < len(self.causal_context_windows):
            raise ValueError("causal_window_index out of range")

    @property
    def causal_window(self):
        return self.causal_context_windows[self.causal_window_index]

    @property
    def bidi_right_per_layer(self):
        # distribute the total right context over layers so the finalization
        # rule (>= right_context_frames from the prefix end) is exact
        return self.right_context_frames // self.n_layers

    def fingerprint(self):
        return (
            self.mode,
            self.P,
            self.n_layers,
            self.d_model,
            self.d_in,
            self.causal_window,
        )


def num_steps(t_raw, p):
    """Length law: T_enc = ceil(T_raw / P)."""
    return -(-t_raw // p)


def _frames_of(x):
    if isinstance(x, SpeechUtterance):
        return x.frames
    return x


class EncoderCache:
    """Per-layer retained left-context state for incremental causal encoding."""

    def __init__(self, cfg, dtype=np.float64):
        self.fingerprint = cfg.fingerprint()
        self.dtype = dtype
        self.raw_pending = np.zeros((0, cfg.d_in), dtype=dtype)
        self.n_steps_in = 0  # layer-0 steps produced so far
        self.bufs = [np.zeros((0, cfg.d_model), dtype=dtype) for _ in range(cfg.n_layers)]
        self.starts = [0] * cfg.n_layers
        self.next_out = [0] * cfg.n_layers
        self.emitted = 0
        self.done = False


class SpeechEncoder:
    def __init__(self, store, prefix, cfg):
        self.cfg = cfg
        self.proj_w = store.normal(f"{prefix}.proj_w", (cfg.P * cfg.d_in, cfg.d_model))
        self.proj_b = store.zeros(f"{prefix}.proj_b", (cfg.d_model,))
        self.blocks = [
            TransformerBlock(store, f"{prefix}.block{i}", cfg.d_model, cfg.n_heads, cfg.d_ff)
            for i in range(cfg.n_layers)
        ]
        self.out_ln = LayerNormParams(store, f"{prefix}.out_ln", cfg.d_model)
        self.pe = positional_encoding(cfg.max_steps, cfg.d_model, dtype=store.dtype)

    # --- shared pieces ---

    def downsample(self, frames):
        """Stack P consecutive frames (zero-padding the tail) and project."""
        if not isinstance(frames, Tensor):
            frames = Tensor(np.asarray(frames, dtype=self.proj_w.dtype))
        t_raw = frames.shape[0]
        if t_raw < 1:
            raise ValueError("downsample needs at least one frame")
        p = self.cfg.P
        t_enc = num_steps(t_raw, p)
        pad = t_enc * p - t_raw
        if pad:
            zeros = Tensor(np.zeros((pad, frames.shape[1]), dtype=frames.dtype))
            frames = T.concat([frames, zeros], axis=0)
        stacked = T.reshape(frames, (t_enc, p * self.cfg.d_in))
        return T.add(T.matmul(stacked, self.proj_w), self.proj_b)

    def _inputs(self, frames, start_step=0):
        x = self.downsample(frames)
        t = x.shape[0]
        return T.add(x, Tensor(self.pe[start_step : start_step + t]))

    def _layer_mask(self):
        if self.cfg.mode == "causal":
            return self.cfg.causal_window
        if self.cfg.bidi_window_left is not None:
            return (self.cfg.bidi_window_left, self.cfg.bidi_right_per_layer)
        return None  # unbounded

    def encode(self, frames, mask_override=None):
        """Full-sequence encoding of raw frames under the mode's masks.

        Differentiable; used by training and by the offline/one-shot paths.
        """
        x = self._inputs(frames)
        t = x.shape[0]
        win = self._layer_mask() if mask_override is None else mask_override
        mask = full_mask(t, t) if win is None else window_mask(t, *win)
        for block in self.blocks:
            x = block(x, mask)
        return self.out_ln(x)

    # --- mode entry points ---

    def encode_offline(self, utterance):
        if self.cfg.mode != "bidi":
            raise ValueError(f"encode_offline requires mode 'bidi', got {self.cfg.mode!r}")
        with no_grad():
            states = self.encode(_frames_of(utterance))
        return EncoderOutput(states.data, self.cfg.P)

    def encode_streaming_bidi(self, prefix_frames, final=False):
        """Re-encode the available prefix; returns (EncoderOutput, n_finalized).

        States at least ``right_context_frames`` steps from the prefix end are
        final; a final prefix finalizes everything.
        """
        if self.cfg.mode != "bidi_recompute":
            raise ValueError(
                f"encode_streaming_bidi requires mode 'bidi_recompute', got {self.cfg.mode!r}"
            )
        with no_grad():
            states = self.encode(_frames_of(prefix_frames))
        t = states.shape[0]
        n_final = t if final else max(0, t - self.cfg.right_context_frames)
        return EncoderOutput(states.data, self.cfg.P), n_final

    def encode_causal_full(self, frames):
        if self.cfg.mode != "causal":
            raise ValueError(f"encode_causal_full requires mode 'causal', got {self.cfg.mode!r}")
        with no_grad():
            states = self.encode(_frames_of(frames))
        return EncoderOutput(states.data, self.cfg.P)

    def new_cache(self):
        return EncoderCache(self.cfg, dtype=self.proj_w.dtype)

    def encode_causal_incremental(self, block_frames, cache, final=False):
        """Feed a block of raw frames; returns (newly final states, cache).

        Any partition of the input yields the same concatenated outputs as
        ``encode_causal_full``; the whole utterance in one fresh-cache block
        takes the full-sequence path and is bit-exact by construction.
        """
        if self.cfg.mode != "causal":
            raise ValueError("encode_causal_incremental requires mode 'causal'")
        if cache.fingerprint != self.cfg.fingerprint():
            raise ValueError("cache was built for a different encoder configuration")
        if cache.done:
            raise ValueError("cache already finalized")
        block_frames = np.asarray(_frames_of(block_frames), dtype=self.proj_w.dtype)
        if block_frames.ndim != 2 or block_frames.shape[1] != self.cfg.d_in:
            raise ValueError(f"block must be [n, {self.cfg.d_in}], got {block_frames.shape}")
        if final:
            cache.done = True

        # one-shot fast path: fresh cache + final block == full-sequence encode
        fresh = cache.n_steps_in == 0 and cache.raw_pending.shape[0] == 0 and cache.emitted == 0
        if fresh and final and block_frames.shape[0] > 0:
            out = self.encode_causal_full(block_frames)
            cache.emitted = len(out)
            return out.states, cache

        left, right = self.cfg.causal_window
        p = self.cfg.P

        raw = np.concatenate([cache.raw_pending, block_frames], axis=0)
        n_whole = (raw.shape[0] // p) * p
        consumed, cache.raw_pending = raw[:n_whole], raw[n_whole:]
        if final and cache.raw_pending.shape[0] > 0:
            pad = np.zeros((p - cache.raw_pending.shape[0], self.cfg.d_in), dtype=raw.dtype)
            consumed = np.concatenate([consumed, cache.raw_pending, pad], axis=0)
            cache.raw_pending = raw[:0]

        with no_grad():
            if consumed.shape[0] > 0:
                new_in = self._inputs(Tensor(consumed), start_step=cache.n_steps_in).data
                cache.n_steps_in += new_in.shape[0]
                cache.bufs[0] = np.concatenate([cache.bufs[0], new_in], axis=0)

            emitted = np.zeros((0, self.cfg.d_model), dtype=cache.dtype)
            for l in range(self.cfg.n_layers):
                buf, start = cache.bufs[l], cache.starts[l]
                end = start + buf.shape[0]
                can_to = end - 1 if final else end - 1 - right
                a = cache.next_out[l]
                if can_to < a:
                    continue
                klo = max(0, a - left)
                keys = Tensor(buf[klo - start :])
                queries = Tensor(buf[a - start : can_to + 1 - start])
                q_abs = np.arange(a, can_to + 1)[:, None]
                k_abs = np.arange(klo, end)[None, :]
                mask = (k_abs >= q_abs - left) & (k_abs <= q_abs + right)
                out = self._block_rows(self.blocks[l], queries, keys, mask).data
                cache.next_out[l] = can_to + 1
                keep_from = max(0, cache.next_out[l] - left)
                if keep_from > start:
                    cache.bufs[l] = buf[keep_from - start :]
                    cache.starts[l] = keep_from
                if l + 1 < self.cfg.n_layers:
                    cache.bufs[l + 1] = np.concatenate([cache.bufs[l + 1], out], axis=0)
                else:
                    emitted = self.out_ln(Tensor(out)).data
        cache.emitted += emitted.shape[0]
        return emitted, cache

    def _block_rows(self, block, x_q, x_kv, mask):
        """Block output for query rows against a key buffer that contains every
        allowed key; row-local sublayers make this equal the full-sequence rows."""
        qn = block.ln1(x_q)
        kn = block.ln1(x_kv)
        h = T.add(x_q, block.self_attn(qn, kn, mask))
        return T.add(h, block.ffn(block.ln3(h)))
