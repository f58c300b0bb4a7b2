"""Fusion-cost comparison: prepend-style vs cross-attention speech fusion.

The closed-form cost model counts attention score-matrix entries (one per
query/key pair per attention call; heads share positions since they split
the feature dim). Prepending L_a speech steps in front of L_t text tokens
costs n_llm * (L_t + L_a)^2 score entries; routing speech through X bridge
cross-attention layers instead costs n_llm * L_t^2 + X * (L_t * L_a + L_t^2).
Projection FLOPs are reported separately for honesty.

``run_bench`` instruments real forwards of both variants on shared kernels
and measures wall clocks; the instrumented score counts must equal the
closed form exactly. Grid points run sequentially on one thread for timing
stability.
"""

import csv
import io
import statistics
import time
from dataclasses import dataclass

import numpy as np

from . import layers
from . import tensor as T
from .tensor import Tensor, no_grad
from .layers import ParamStore, TransformerBlock, causal_mask, positional_encoding
from .model import BridgeConfig, ModelConfig, SpeechLM
from .encoder import EncoderConfig
from .seeding import substream

VARIANTS = ("prepend", "xattn")


@dataclass
class CostModel:
    L_t: int
    L_a: int
    d_model: int
    n_layers_llm: int
    X: int

    def __post_init__(self):
        if min(self.L_t, self.d_model, self.n_layers_llm) < 1 or self.L_a < 0 or self.X < 0:
            raise ValueError("cost model dimensions must be positive (L_a, X may be 0)")


def predicted_ops(variant, m):
    """Attention score-matrix entries for one forward pass."""
    if variant == "prepend":
        return m.n_layers_llm * (m.L_t + m.L_a) ** 2
    if variant == "xattn":
        return m.n_layers_llm * m.L_t**2 + m.X * (m.L_t * m.L_a + m.L_t**2)
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def projection_flops(variant, m):
    """Multiply-accumulates in attention/FFN projections (reported, not asserted)."""
    d = m.d_model
    d_ff = 2 * d
    def block(rows):
        return 4 * rows * d * d + 2 * rows * d * d_ff
    if variant == "prepend":
        return m.n_layers_llm * block(m.L_t + m.L_a)
    # bridge layer: self-attn q/k/v/o on L_t rows, cross-attn q/o on L_t rows
    # plus k/v on L_a rows
    per_bridge = (6 * m.L_t + 2 * m.L_a) * d * d
    return m.n_layers_llm * block(m.L_t) + m.X * per_bridge


@dataclass
class BenchResult:
    variant: str
    L_t: int
    L_a: int
    pred_ops: int
    score_ops_measured: int
    measured_ms: float
    mem_bytes: int


class PrependLM:
    """Speech states concatenated in front of the text embeddings as LLM
    input (decoder-only fusion); same backbone blocks as the bridge model."""

    def __init__(self, vocab_size, d_model, n_heads, d_ff, n_layers, seed=0, dtype=np.float64):
        self.store = ParamStore(substream(seed, "init"), dtype=dtype)
        self.embed = self.store.normal("embed", (vocab_size, d_model))
        self.blocks = [
            TransformerBlock(self.store, f"llm.block{i}", d_model, n_heads, d_ff)
            for i in range(n_layers)
        ]
        self.out_ln = layers.LayerNormParams(self.store, "llm.out_ln", d_model)
        self.out_w = self.store.normal("out_w", (d_model, vocab_size))
        self.pe = positional_encoding(4096, d_model, dtype=dtype)

    def forward_tokens(self, tokens, enc_states):
        """Logits [L_t, V] on the text rows of the combined sequence."""
        if not isinstance(enc_states, Tensor):
            enc_states = Tensor(np.asarray(enc_states, dtype=self.store.dtype))
        ids = np.asarray(list(tokens), dtype=np.int64)
        e = T.embedding(self.embed, ids)
        x = T.concat([enc_states, e], axis=0)
        total = x.shape[0]
        x = T.add(x, Tensor(self.pe[:total]))
        mask = causal_mask(total)
        for block in self.blocks:
            x = block(x, mask)
        text = x[enc_states.shape[0] :]
        return T.matmul(self.out_ln(text), self.out_w)


def _build_pair(cost, vocab_size, n_heads, seed, dtype):
    enc_cfg = EncoderConfig(
        mode="causal",
        P=8,
        n_layers=1,
        d_model=cost.d_model,
        d_in=8,
        n_heads=n_heads,
        d_ff=2 * cost.d_model,
        causal_window_index=3,
    )
    xattn = SpeechLM(
        ModelConfig(
            vocab_size=vocab_size,
            eos_id=0,
            d_model=cost.d_model,
            n_heads=n_heads,
            d_ff=2 * cost.d_model,
            llm_layers=cost.n_layers_llm,
            bridge=BridgeConfig(x_layers=max(1, cost.X)),
            encoder=enc_cfg,
            max_pos=4096,
        ),
        seed=seed,
    )
    prepend = PrependLM(
        vocab_size,
        cost.d_model,
        n_heads,
        2 * cost.d_model,
        cost.n_layers_llm,
        seed=seed,
        dtype=np.float64,
    )
    return xattn, prepend


def run_bench(grid, *, d_model=64, n_layers_llm=4, x_layers=2, n_heads=4, vocab_size=256,
              repetitions=7, seed=0, timer=time.perf_counter):
    """Measure both fusion variants over a (L_t, L_a) grid.

    Returns BenchResults (two per grid point). Median wall-clock over
    ``repetitions`` after one warmup; memory is the tensor bytes allocated
    during one forward (the graph-free high-water proxy). Raises if the
    measured times are too close to the timer's granularity to trust.
    """
    granularity = max(time.get_clock_info("perf_counter").resolution, 1e-9)
    results = []
    for l_t, l_a in grid:
        cost = CostModel(L_t=l_t, L_a=l_a, d_model=d_model, n_layers_llm=n_layers_llm, X=x_layers)
        xattn, prepend = _build_pair(cost, vocab_size, n_heads, seed, np.float64)
        rng = substream(seed, "bench", l_t, l_a)
        tokens = rng.integers(0, vocab_size, size=l_t)
        enc = rng.normal(size=(l_a, d_model))

        def xattn_fwd():
            # boundary irrelevant under an explicit all-allowed mask
            return xattn.forward_tokens(tokens, 1, enc, cross_mask=layers.full_mask(l_t, l_a))

        def prepend_fwd():
            return prepend.forward_tokens(tokens, enc)

        for variant, fwd in (("prepend", prepend_fwd), ("xattn", xattn_fwd)):
            with no_grad():
                fwd()  # warmup
                layers.reset_score_ops()
                T.reset_alloc_bytes()
                out = fwd()
                ops = layers.score_ops()
                mem = T.alloc_bytes()
                if out.shape != (l_t, vocab_size):
                    raise AssertionError(f"unexpected output shape {out.shape}")
                times = []
                for _ in range(repetitions):
                    t0 = timer()
                    fwd()
                    times.append(timer() - t0)
            med = statistics.median(times)
            if med < 10 * granularity:
                raise RuntimeError(
                    f"measured {med * 1e3:.6f} ms is below 10x timer granularity; use larger sizes"
                )
            results.append(
                BenchResult(
                    variant=variant,
                    L_t=l_t,
                    L_a=l_a,
                    pred_ops=predicted_ops(variant, cost),
                    score_ops_measured=ops,
                    measured_ms=med * 1e3,
                    mem_bytes=mem,
                )
            )
    return results


DEFAULT_GRID = ((16, 128), (16, 256), (16, 512), (16, 1024))


def speedups(results):
    """xattn speedup per (L_t, L_a): prepend time / xattn time."""
    by_key = {}
    for r in results:
        by_key.setdefault((r.L_t, r.L_a), {})[r.variant] = r
    out = {}
    for key, pair in sorted(by_key.items()):
        if set(pair) == set(VARIANTS):
            out[key] = pair["prepend"].measured_ms / pair["xattn"].measured_ms
    return out


def report(results):
    """(csv_text, summary_text) for a bench run."""
    if not results:
        raise ValueError("no benchmark results to report")
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["variant", "L_t", "L_a", "pred_ops", "measured_ms", "mem_bytes"])
    for r in results:
        writer.writerow([r.variant, r.L_t, r.L_a, r.pred_ops, repr(r.measured_ms), r.mem_bytes])
    ratio = speedups(results)
    vals = list(ratio.values())
    lines = [
        f"grid points: {len(ratio)}  (repetitions are median wall-clock)",
        f"xattn speedup over prepend: min {min(vals):.2f}x, "
        f"median {statistics.median(vals):.2f}x, max {max(vals):.2f}x",
    ]
    for (l_t, l_a), s in ratio.items():
        lines.append(f"  L_t={l_t} L_a={l_a}: {s:.2f}x")
    return buf.getvalue(), "\n".join(lines)
