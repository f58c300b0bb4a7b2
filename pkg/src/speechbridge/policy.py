"""Wait-k read/write policy: scheduling, streaming masks, and the decode loop.

The policy decides, before each target token, whether to READ another block
of L encoder steps (L*P raw frames) of speech or to WRITE the next token.
Under wait-k, token i may be written once min(T_enc, (K+i-1)*L) encoder
steps are finalized; after the source is exhausted the remaining tokens are
written with no further reads.

The same schedule is realized as a cross-attention mask at training time
(``schedule_mask``), which is what makes masked training equal streaming
inference. Convention: the row that predicts target token i (the row whose
next-token logits produce it) sees visible_steps(i); rows before it, which
only carry the text context prompt, get no cross-attention at all.

A streaming session owns its encoder cache, frame source, and trace;
sessions are independent of each other, and each frame source feeds
exactly one session.
"""

from dataclasses import dataclass

import numpy as np

from .tensor import no_grad


@dataclass
class WaitKConfig:
    K: int = 10
    L: int = 4  # pre-decision ratio: encoder steps consumed per READ
    P: int = 8  # encoder downsample factor (raw frames per step)

    def __post_init__(self):
        if self.K < 1 or self.L < 1 or self.P < 1:
            raise ValueError(f"K, L, P must all be >= 1, got {self.K}, {self.L}, {self.P}")

    @property
    def step_ms(self):
        """Audio span of one READ: L * P * 10 ms."""
        return self.L * self.P * 10


@dataclass
class StreamingMaskSpec:
    """Just (K, L): what the bridge needs to build a training-time mask."""

    K: int
    L: int


def visible_steps(i, cfg, t_enc):
    """Encoder steps visible when predicting 1-based target token i."""
    if i < 1:
        raise ValueError("target index is 1-based")
    return min(t_enc, (cfg.K + i - 1) * cfg.L)


def offline_mask(l_t, boundary, t_enc):
    """Full visibility for every predicting row; context-only rows masked."""
    mask = np.zeros((l_t, t_enc), dtype=bool)
    mask[max(0, boundary - 1) :, :] = True
    return mask


def schedule_mask(l_t, boundary, cfg, t_enc):
    """Wait-k cross-attention mask [l_t, t_enc].

    Rows strictly before the first predicting row (pure text-context rows)
    are fully masked; the row predicting target i allows keys
    [0, visible_steps(i)). Allowed prefixes are nondecreasing in the row
    index (staircase property).
    """
    if boundary > l_t:
        raise ValueError(f"boundary {boundary} exceeds sequence length {l_t}")
    mask = np.zeros((l_t, t_enc), dtype=bool)
    first = max(0, boundary - 1)
    for row in range(first, l_t):
        i = row - first + 1  # target index this row predicts
        mask[row, : visible_steps(i, cfg, t_enc)] = True
    return mask


# -----------------------------------------------------------------------------
# Policies
# -----------------------------------------------------------------------------

READ = "READ"
WRITE = "WRITE"


class WaitKPolicy:
    """Fixed wait-k policy: state -> READ or WRITE."""

    kind = "waitk"

    def __init__(self, cfg):
        self.cfg = cfg

    def needed_steps(self, n_written):
        return (self.cfg.K + n_written) * self.cfg.L

    def decide(self, n_final_steps, n_written, exhausted):
        if exhausted or n_final_steps >= self.needed_steps(n_written):
            return WRITE
        return READ


_POLICIES = {"waitk": WaitKPolicy}


def attach_policy(policy_kind, cfg):
    """Look up a read/write policy by name (extension point for adaptive ones)."""
    if policy_kind not in _POLICIES:
        raise ValueError(
            f"unknown policy {policy_kind!r}; supported kinds: {sorted(_POLICIES)}"
        )
    return _POLICIES[policy_kind](cfg)


# -----------------------------------------------------------------------------
# Traces
# -----------------------------------------------------------------------------


@dataclass
class StreamEvent:
    kind: str  # READ or WRITE
    n_frames: int = 0  # READ: raw frames consumed
    token: int | None = None  # WRITE: emitted token id
    d: int | None = None  # WRITE: cumulative raw frames consumed

    def line(self):
        if self.kind == READ:
            return f"READ {self.n_frames}"
        return f"WRITE {self.token} {self.d}"


@dataclass
class LatencyTrace:
    d: list  # raw frames consumed before emitting token i (content tokens)
    source_len_frames: int
    frame_ms: int = 10


@dataclass
class StreamResult:
    tokens: list
    events: list
    latency: LatencyTrace


def write_trace(events, path):
    with open(path, "w") as fh:
        for ev in events:
            fh.write(ev.line() + "\n")


def read_trace(path):
    """Parse a trace log back into StreamEvents (for metrics/external tools)."""
    events = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] == READ and len(parts) == 2:
                events.append(StreamEvent(READ, n_frames=int(parts[1])))
            elif parts[0] == WRITE and len(parts) == 3:
                events.append(StreamEvent(WRITE, token=int(parts[1]), d=int(parts[2])))
            else:
                raise ValueError(f"{path}:{lineno}: malformed trace line {line!r}")
    return events


def trace_delays(events, eos_id=None):
    """Per-token d_i from a trace, excluding a final end-of-sequence write."""
    d = [e.d for e in events if e.kind == WRITE]
    writes = [e.token for e in events if e.kind == WRITE]
    if eos_id is not None and writes and writes[-1] == eos_id:
        d = d[:-1]
    return d


class StreamSourceError(RuntimeError):
    """Frame source failed mid-stream; carries the trace up to the failure."""

    def __init__(self, message, events):
        super().__init__(message)
        self.events = events


class FrameSource:
    """Incremental supplier over a fixed utterance."""

    def __init__(self, frames):
        self.frames = np.asarray(frames, dtype=np.float64)
        self.pos = 0

    @property
    def total_len(self):
        return self.frames.shape[0]

    def read(self, n):
        chunk = self.frames[self.pos : self.pos + n]
        self.pos += chunk.shape[0]
        return chunk


# -----------------------------------------------------------------------------
# Streaming decode loop
# -----------------------------------------------------------------------------


class _EncoderSession:
    """Incremental encoding facade over the causal and bidi_recompute modes."""

    def __init__(self, model):
        mode = model.encoder.cfg.mode
        if mode not in ("causal", "bidi_recompute"):
            raise ValueError(f"stream decoding needs mode 'causal' or 'bidi_recompute', got {mode!r}")
        self.model = model
        self.mode = mode
        if mode == "causal":
            self.cache = model.encoder.new_cache()
            self.states = np.zeros((0, model.encoder.cfg.d_model), dtype=model.store.dtype)
            self.n_final = 0
        else:
            self.prefix = np.zeros((0, model.encoder.cfg.d_in), dtype=np.float64)
            self.states = np.zeros((0, model.encoder.cfg.d_model), dtype=model.store.dtype)
            self.n_final = 0

    def feed(self, chunk, final):
        if self.mode == "causal":
            delta, self.cache = self.model.encoder.encode_causal_incremental(
                chunk, self.cache, final=final
            )
            if delta.shape[0]:
                self.states = np.concatenate([self.states, delta], axis=0)
            self.n_final = self.states.shape[0]
        else:
            if chunk.shape[0]:
                self.prefix = np.concatenate([self.prefix, chunk], axis=0)
            out, n_final = self.model.encoder.encode_streaming_bidi(self.prefix, final=final)
            self.states = out.states
            self.n_final = n_final

    def final_states(self):
        return self.states[: self.n_final]


def stream_decode(
    model,
    frame_source,
    context_tokens,
    cfg,
    max_len,
    forced_tokens=None,
    trace_path=None,
    policy_kind="waitk",
):
    """Interleaved READ/WRITE greedy decoding under a wait-k schedule.

    Returns a StreamResult whose ``tokens`` exclude the end-of-sequence
    token; the trace records every event including the final WRITE. With
    ``forced_tokens`` the writes emit the given tokens (latency measurement
    under forced decoding) instead of greedy picks.
    """
    if isinstance(frame_source, np.ndarray):
        frame_source = FrameSource(frame_source)
    policy = attach_policy(policy_kind, cfg)
    session = _EncoderSession(model)
    events = []
    tokens = []
    d = []
    read_frames = 0
    exhausted = False
    limit = len(forced_tokens) if forced_tokens is not None else max_len

    try:
        while len(tokens) < limit:
            while not exhausted and policy.decide(session.n_final, len(tokens), exhausted) == READ:
                chunk = frame_source.read(cfg.L * cfg.P)
                got = chunk.shape[0]
                if got:
                    events.append(StreamEvent(READ, n_frames=got))
                    read_frames += got
                if got < cfg.L * cfg.P:
                    exhausted = True
                session.feed(chunk, final=exhausted)
            with no_grad():
                logits = model.prefix_logits(
                    list(context_tokens) + tokens,
                    len(context_tokens),
                    session.final_states(),
                    waitk_cfg=cfg,
                )
            if forced_tokens is not None:
                tok = int(forced_tokens[len(tokens)])
            else:
                tok = int(np.argmax(logits))
            events.append(StreamEvent(WRITE, token=tok, d=read_frames))
            if forced_tokens is None and tok == model.cfg.eos_id:
                break
            tokens.append(tok)
            d.append(read_frames)
    except StreamSourceError:
        raise
    except Exception as exc:  # preserve the trace up to the failure
        if trace_path:
            write_trace(events, trace_path)
        raise StreamSourceError(f"frame source or model failed mid-stream: {exc}", events) from exc

    if trace_path:
        write_trace(events, trace_path)
    latency = LatencyTrace(d=d, source_len_frames=frame_source.total_len)
    return StreamResult(tokens=tokens, events=events, latency=latency)
