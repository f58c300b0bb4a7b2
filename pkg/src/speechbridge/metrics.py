"""Latency and quality measurement.

LAAL here is the non-computation-aware, length-adaptive average lagging:
with gamma = max(hyp_len, ref_len) / source_len and tau the first index at
which the source is fully consumed (hyp_len if never),

    LAAL = (1 / tau) * sum_{i=1..tau} ( d_i - (i - 1) / gamma )

in frames, reported in milliseconds. Quality at this scale is token
accuracy (1 - Levenshtein error rate), since synthetic tokens carry no word
segmentation.
"""

import csv
import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .policy import WaitKConfig, stream_decode


@dataclass
class LaalInput:
    d: list
    hyp_len: int
    ref_len: int
    source_len_frames: int
    frame_ms: int = 10

    def __post_init__(self):
        if len(self.d) != self.hyp_len:
            raise ValueError(f"len(d)={len(self.d)} must equal hyp_len={self.hyp_len}")
        if any(b < a for a, b in zip(self.d, self.d[1:])):
            raise ValueError("d must be nondecreasing")
        if self.d and self.d[-1] > self.source_len_frames:
            raise ValueError("d cannot exceed the source length")


def laal(inp):
    """Length-adaptive average lagging in milliseconds."""
    if not inp.d:
        raise ValueError("laal needs at least one emitted token")
    gamma = max(inp.hyp_len, inp.ref_len) / inp.source_len_frames
    tau = inp.hyp_len
    for i, di in enumerate(inp.d, start=1):
        if di == inp.source_len_frames:
            tau = i
            break
    total = 0.0
    for i in range(1, tau + 1):
        total += inp.d[i - 1] - (i - 1) / gamma
    return (total / tau) * inp.frame_ms


def laal_from_trace(trace, ref_len):
    return laal(
        LaalInput(
            d=list(trace.d),
            hyp_len=len(trace.d),
            ref_len=ref_len,
            source_len_frames=trace.source_len_frames,
            frame_ms=trace.frame_ms,
        )
    )


def token_error_rate(hyp, ref):
    """Levenshtein distance over reference length."""
    if len(ref) == 0:
        if len(hyp) == 0:
            return 0.0
        warnings.warn("empty reference with nonempty hypothesis; rate = hyp length")
        return float(len(hyp))
    return kernels.levenshtein(np.asarray(hyp), np.asarray(ref)) / len(ref)


def token_accuracy(hyp, ref):
    return max(0.0, 1.0 - token_error_rate(hyp, ref))


# -----------------------------------------------------------------------------
# Dataset-level evaluation and the K-sweep
# -----------------------------------------------------------------------------


@dataclass
class TradeoffPoint:
    K: int
    laal_ms: float
    quality: float
    n: int
    warnings: list = field(default_factory=list)


def evaluate_offline(model, examples, max_len):
    """Mean token accuracy of greedy offline decoding."""
    accs = []
    for ex in examples:
        hyp = model.decode_offline(ex.utterance, ex.prompt.context, max_len)
        accs.append(token_accuracy(hyp, ex.prompt.targets))
    return float(np.mean(accs))


def evaluate_stream(model, examples, cfg, max_len, forced=False, trace_dir=None):
    """Mean (accuracy, LAAL ms) of streaming decoding at one wait-k setting."""
    accs, lags = [], []
    for ex in examples:
        forced_tokens = list(ex.prompt.targets) if forced else None
        trace_path = None
        if trace_dir is not None:
            trace_path = f"{trace_dir}/trace_{ex.index:05d}_K{cfg.K}.log"
        res = stream_decode(
            model,
            ex.utterance.frames,
            ex.prompt.context,
            cfg,
            max_len,
            forced_tokens=forced_tokens,
            trace_path=trace_path,
        )
        accs.append(token_accuracy(res.tokens, ex.prompt.targets))
        if res.latency.d:
            lags.append(laal_from_trace(res.latency, len(ex.prompt.targets)))
        else:
            # empty hypothesis: charge the latency of the lone EOS write
            d_eos = res.events[-1].d if res.events else ex.utterance.frames.shape[0]
            lags.append(
                laal(LaalInput([d_eos], 1, len(ex.prompt.targets), ex.utterance.frames.shape[0]))
            )
    return float(np.mean(accs)), float(np.mean(lags))


def sweep_k(model, examples, ks, cfg_base, max_len, forced=False, trained_k_range=None):
    """Stream-decode the dataset at each K; returns TradeoffPoints sorted by K."""
    points = []
    for k in sorted(ks):
        warns = []
        if trained_k_range is not None and not trained_k_range[0] <= k <= trained_k_range[1]:
            warns.append(f"K={k} outside trained range {list(trained_k_range)}")
        cfg = WaitKConfig(K=k, L=cfg_base.L, P=cfg_base.P)
        quality, lag = evaluate_stream(model, examples, cfg, max_len, forced=forced)
        points.append(
            TradeoffPoint(K=k, laal_ms=lag, quality=quality, n=len(examples), warnings=warns)
        )
    return points


def tradeoff_csv(points):
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["K", "laal_ms", "quality", "n"])
    for p in points:
        writer.writerow([p.K, repr(p.laal_ms), repr(p.quality), p.n])
    return buf.getvalue()
