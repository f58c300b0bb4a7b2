"""Next-token training with mixed offline/streaming masks.

Per example, with probability ``stream_fraction`` a wait-k K is sampled
uniformly from ``k_range`` and the schedule mask applied; otherwise the
offline mask is used. Loss is computed only on rows predicting target
tokens (plus the end-of-sequence token). Gradients are clipped to global
norm ``clip_norm`` before the Adam update.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .optim import adam_step, clip_global_norm
from .policy import StreamingMaskSpec
from .seeding import substream

IGNORE = -1


class NonFiniteLossError(FloatingPointError):
    pass


def next_token_labels(prompt, eos_id):
    """Labels aligned to input rows: row p predicts token p+1; only rows
    predicting a target token (or the closing EOS) carry loss."""
    tokens = prompt.tokens
    l_t = len(tokens)
    labels = np.full(l_t, IGNORE, dtype=np.int64)
    first = max(0, prompt.boundary - 1)
    labels[first : l_t - 1] = tokens[first + 1 :]
    labels[l_t - 1] = eos_id
    return labels


def example_loss(model, example, mask_spec=None):
    logits = model.forward(example.utterance, example.prompt, mask_spec=mask_spec)
    labels = next_token_labels(example.prompt, model.cfg.eos_id)
    return T.cross_entropy(logits, labels, ignore_index=IGNORE)


def sample_mask_spec(rng, k_range, stream_fraction, waitk_L):
    """Draw the per-example mask decision; consumes rng deterministically."""
    use_stream = rng.random() < stream_fraction
    k = int(rng.integers(k_range[0], k_range[1] + 1))
    return StreamingMaskSpec(K=k, L=waitk_L) if use_stream else None


def train_step(
    model,
    batch,
    opt_state,
    *,
    lr,
    k_range=(3, 12),
    stream_fraction=0.0,
    waitk_L=4,
    rng=None,
    betas=(0.9, 0.999),
    eps=1e-8,
    weight_decay=0.0,
    clip_norm=1.0,
):
    """One optimization step over a batch; returns (mean loss, new state)."""
    if rng is None:
        rng = np.random.default_rng(0)
    model.store.zero_grads()
    total = None
    for example in batch:
        spec = sample_mask_spec(rng, k_range, stream_fraction, waitk_L)
        loss = example_loss(model, example, mask_spec=spec)
        total = loss if total is None else T.add(total, loss)
    total = T.mul(total, 1.0 / len(batch))
    loss_value = total.item()
    if not np.isfinite(loss_value):
        raise NonFiniteLossError(f"non-finite training loss: {loss_value}")
    total.backward()
    grads, _ = clip_global_norm(model.store.grads(), clip_norm)
    new_params, opt_state = adam_step(
        model.store.arrays(), grads, opt_state, lr, betas=betas, eps=eps, weight_decay=weight_decay
    )
    for name, tensor in model.store.tensors.items():
        tensor.data = new_params[name]
    model.store.zero_grads()
    return loss_value, opt_state


def eval_loss(model, examples, mask_spec=None):
    """Mean per-example loss without touching parameters."""
    vals = []
    for example in examples:
        with T.no_grad():
            vals.append(example_loss(model, example, mask_spec=mask_spec).item())
    return float(np.mean(vals))


@dataclass
class TrainRow:
    step: int
    loss: float | None  # None on the pre-training eval row
    eval_metric: dict | None = None


def train_loop(
    model,
    examples,
    *,
    steps,
    batch_size,
    seed,
    lr,
    weight_decay=0.0,
    clip_norm=1.0,
    k_range=(3, 12),
    stream_fraction=0.0,
    waitk_L=4,
    betas=(0.9, 0.999),
    eps=1e-8,
    eval_every=0,
    eval_fn=None,
    opt_state=None,
):
    """Deterministic training loop; returns the per-step history.

    Batches are sampled with replacement from a named substream of ``seed``;
    K-sampling uses its own substream so it can be varied independently.
    Raises NonFiniteLossError with the history preserved on ``rows``.
    """
    batch_rng = substream(seed, "batches")
    k_rng = substream(seed, "ksample")
    rows = []
    if eval_fn is not None:
        rows.append(TrainRow(step=0, loss=None, eval_metric=eval_fn(model)))
    for step in range(1, steps + 1):
        idx = batch_rng.integers(0, len(examples), size=batch_size)
        batch = [examples[i] for i in idx]
        try:
            loss, opt_state = train_step(
                model,
                batch,
                opt_state,
                lr=lr,
                k_range=k_range,
                stream_fraction=stream_fraction,
                waitk_L=waitk_L,
                rng=k_rng,
                betas=betas,
                eps=eps,
                weight_decay=weight_decay,
                clip_norm=clip_norm,
            )
        except NonFiniteLossError as exc:
            exc.rows = rows
            raise
        metric = None
        if eval_fn is not None and eval_every and (step % eval_every == 0 or step == steps):
            metric = eval_fn(model)
        rows.append(TrainRow(step=step, loss=loss, eval_metric=metric))
    return rows, opt_state
