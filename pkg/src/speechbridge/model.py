"""Cross-attention speech-to-LLM bridge model.

Text tokens are embedded with the LLM's input embedding table and, after a
query encoder (causal self-attention interleaved in the bridge layers, or a
2-layer tanh RNN), used as queries that cross-attend into the speech
encoder states. Each of the X bridge layers contributes one cross-attention
read; the accumulated speech features plus the raw token embeddings (the
residual text path) form the LLM input. The LLM backbone itself is a plain
causal decoder stack with no speech-specific parameters, so zeroing the
bridge's cross-attention output projections makes the whole model collapse
exactly onto a text-only LM.

Training is next-token prediction with the loss restricted to the rows that
predict target tokens; streaming masks from :mod:`speechbridge.policy` make
train-time masking identical to inference-time streaming.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor, no_grad
from .encoder import EncoderConfig, SpeechEncoder, _frames_of
from .layers import (
    LayerNormParams,
    MultiHeadAttention,
    ParamStore,
    TransformerBlock,
    causal_mask,
    positional_encoding,
)
from .policy import offline_mask, schedule_mask
from .seeding import substream

QUERY_ENCODERS = ("causal_self_attention", "rnn")

CHECKPOINT_VERSION = 1


@dataclass
class PromptLayout:
    """Text context tokens plus target tokens in plain LLM prompt format —
    no interleaved blank or wait tokens, ever."""

    context: list
    targets: list

    @property
    def boundary(self):
        return len(self.context)

    @property
    def tokens(self):
        return list(self.context) + list(self.targets)


@dataclass
class BridgeConfig:
    x_layers: int = 2
    query_encoder: str = "causal_self_attention"
    rnn_layers: int = 2

    def __post_init__(self):
        if self.x_layers < 1:
            raise ValueError("x_layers must be >= 1")
        if self.query_encoder not in QUERY_ENCODERS:
            raise ValueError(f"query_encoder must be one of {QUERY_ENCODERS}")


@dataclass
class ModelConfig:
    vocab_size: int = 64
    eos_id: int = 0
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    llm_layers: int = 4
    bridge: BridgeConfig = field(default_factory=BridgeConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    max_pos: int = 1024
    init_scale: float | None = None  # None = fan-in scaling

    def __post_init__(self):
        if isinstance(self.bridge, dict):
            self.bridge = BridgeConfig(**self.bridge)
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if not 0 <= self.eos_id < self.vocab_size:
            raise ValueError("eos_id must lie inside the vocabulary")
        if self.encoder.d_model != self.d_model:
            raise ValueError("encoder d_model must match model d_model")


class _BridgeLayer:
    """One (causal self-attention + cross-attention) bridge layer.

    The self-attention evolves the text query stream; the cross-attention
    reads speech and its output is the layer's only contribution to the
    speech feature accumulator, so a fully masked row or a zeroed output
    projection contributes exactly nothing.
    """

    def __init__(self, store, prefix, d_model, n_heads, with_self_attn):
        self.with_self_attn = with_self_attn
        if with_self_attn:
            self.ln_sa = LayerNormParams(store, f"{prefix}.ln_sa", d_model)
            self.self_attn = MultiHeadAttention(store, f"{prefix}.self_attn", d_model, n_heads)
        self.ln_ca = LayerNormParams(store, f"{prefix}.ln_ca", d_model)
        self.cross_attn = MultiHeadAttention(store, f"{prefix}.cross_attn", d_model, n_heads)


class SpeechLM:
    """Bridge + causal LLM over a shared token embedding table."""

    def __init__(self, cfg, seed=0):
        self.cfg = cfg
        self.store = ParamStore(substream(seed, "init"), init_scale=cfg.init_scale)
        d, v = cfg.d_model, cfg.vocab_size
        self.embed = self.store.normal("embed", (v, d))
        self.encoder = SpeechEncoder(self.store, "encoder", cfg.encoder)
        self.pe = positional_encoding(cfg.max_pos, d, dtype=self.store.dtype)

        bc = cfg.bridge
        self.rnn = None
        if bc.query_encoder == "rnn":
            self.rnn = []
            for i in range(bc.rnn_layers):
                self.rnn.append(
                    {
                        "wx": self.store.normal(f"bridge.rnn{i}.wx", (d, d)),
                        "wh": self.store.normal(f"bridge.rnn{i}.wh", (d, d)),
                        "b": self.store.zeros(f"bridge.rnn{i}.b", (d,)),
                    }
                )
        self.bridge_layers = [
            _BridgeLayer(
                self.store,
                f"bridge.layer{i}",
                d,
                cfg.n_heads,
                with_self_attn=bc.query_encoder == "causal_self_attention",
            )
            for i in range(bc.x_layers)
        ]
        self.llm_blocks = [
            TransformerBlock(self.store, f"llm.block{i}", d, cfg.n_heads, cfg.d_ff)
            for i in range(cfg.llm_layers)
        ]
        self.llm_ln = LayerNormParams(self.store, "llm.out_ln", d)
        # small readout: near-uniform initial predictions (loss ~ ln V)
        self.out_w = self.store.normal("out_w", (d, v), scale=0.02)

    # ------------------------------------------------------------------
    # Forward pieces
    # ------------------------------------------------------------------

    def _embed_tokens(self, tokens):
        ids = np.asarray(list(tokens), dtype=np.int64)
        return T.embedding(self.embed, ids)

    def build_queries(self, tokens):
        """Embed tokens and run the query encoder; causal in both variants."""
        e = self._embed_tokens(tokens)
        q = T.add(e, Tensor(self.pe[: e.shape[0]]))
        if self.rnn is not None:
            q = self._run_rnn(q)
        return q

    def _run_rnn(self, x):
        d = self.cfg.d_model
        for layer in self.rnn:
            rows = []
            h = Tensor(np.zeros((1, d), dtype=self.store.dtype))
            for t in range(x.shape[0]):
                pre = T.add(T.add(T.matmul(x[t : t + 1], layer["wx"]), T.matmul(h, layer["wh"])), layer["b"])
                h = T.tanh(pre)
                rows.append(h)
            x = T.concat(rows, axis=0) if len(rows) > 1 else rows[0]
        return x

    def extract_features(self, queries, text_emb, enc_states, cross_mask):
        """X bridge layers over the query stream; returns text embeddings plus
        the accumulated cross-attention output (the residual text path)."""
        l_t = queries.shape[0]
        if cross_mask.shape != (l_t, enc_states.shape[0]):
            raise T.ShapeError(
                f"cross mask {cross_mask.shape} does not match [{l_t}, {enc_states.shape[0]}]"
            )
        sm = causal_mask(l_t)
        h = queries
        s = None
        for layer in self.bridge_layers:
            if layer.with_self_attn:
                hn = layer.ln_sa(h)
                h = T.add(h, layer.self_attn(hn, hn, sm))
            cq = layer.ln_ca(h if s is None else T.add(h, s))
            c = layer.cross_attn(cq, enc_states, cross_mask)
            s = c if s is None else T.add(s, c)
        return T.add(text_emb, s)

    def _llm(self, x):
        sm = causal_mask(x.shape[0])
        x = T.add(x, Tensor(self.pe[: x.shape[0]]))
        for block in self.llm_blocks:
            x = block(x, sm)
        return T.matmul(self.llm_ln(x), self.out_w)

    def forward_tokens(self, tokens, boundary, enc_states, mask_spec=None, cross_mask=None):
        """Logits [L_t, V] for a token sequence against given encoder states.

        ``mask_spec`` (K, L) builds the wait-k schedule mask; without it the
        offline mask is used (predicting rows see everything, pure context
        rows see nothing). An explicit ``cross_mask`` overrides both.
        """
        if not isinstance(enc_states, Tensor):
            enc_states = Tensor(np.asarray(enc_states, dtype=self.store.dtype))
        l_t, t_enc = len(tokens), enc_states.shape[0]
        if cross_mask is None:
            if mask_spec is None:
                cross_mask = offline_mask(l_t, boundary, t_enc)
            else:
                cross_mask = schedule_mask(l_t, boundary, mask_spec, t_enc)
        e = self._embed_tokens(tokens)
        q = self.build_queries(tokens)
        feats = self.extract_features(q, e, enc_states, cross_mask)
        return self._llm(feats)

    def encode_utterance(self, utterance):
        """Differentiable full-sequence encoding under the mode's masks."""
        return self.encoder.encode(_frames_of(utterance))

    def forward(self, utterance, prompt, mask_spec=None):
        enc = self.encode_utterance(utterance)
        return self.forward_tokens(prompt.tokens, prompt.boundary, enc, mask_spec=mask_spec)

    def text_only_forward(self, tokens):
        """The original textual LM: embeddings straight into the LLM backbone."""
        return self._llm(self._embed_tokens(tokens))

    # ------------------------------------------------------------------
    # Decoding
    # ------------------------------------------------------------------

    def prefix_logits(self, tokens, boundary, enc_states, waitk_cfg=None):
        """Next-token logits (numpy [V]) at the end of ``tokens``."""
        with no_grad():
            logits = self.forward_tokens(tokens, boundary, enc_states, mask_spec=waitk_cfg)
        return logits.data[-1]

    def decode_offline(self, utterance, context_tokens, max_len):
        """Greedy step-by-step generation; each emitted token re-enters the
        query stream (functional recomputation, no KV cache)."""
        with no_grad():
            enc = self.encode_utterance(utterance).data
        tokens = list(context_tokens)
        out = []
        for _ in range(max_len):
            nxt = int(np.argmax(self.prefix_logits(tokens, len(context_tokens), enc)))
            if nxt == self.cfg.eos_id:
                break
            out.append(nxt)
            tokens.append(nxt)
        return out

    # ------------------------------------------------------------------
    # Checkpointing
    # ------------------------------------------------------------------

    def save(self, path):
        cfg = asdict(self.cfg)
        meta = {"version": CHECKPOINT_VERSION, "config": cfg}
        arrays = {f"param:{k}": v for k, v in self.store.arrays().items()}
        np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path) as zf:
            meta = json.loads(bytes(zf["__meta__"]).decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
            arrays = {k[len("param:") :]: zf[k] for k in zf.files if k.startswith("param:")}
        model = cls(ModelConfig(**meta["config"]))
        model.store.load_arrays(arrays)
        return model


def speech_param_names(model):
    """Parameters reachable from speech inputs: encoder plus bridge."""
    return {k for k in model.store.tensors if k.startswith(("encoder.", "bridge."))}
