"""Synthetic frame-to-token tasks standing in for speech corpora.

Each source token is rendered as U noisy copies of a fixed random embedding
(10 ms frames), so an utterance of n tokens spans n*U raw frames. Targets
are derived from the source by the task kind:

- ``copy``: identity (ASR stand-in)
- ``shift_vocab``: (token + offset) mod vocab_size
- ``local_reorder``: swap within windows of 2 (bounded reordering, so wait-k
  quality degrades gracefully at small K — the translation stand-in)

Token id space of the model: data tokens occupy [0, vocab_size); the
end-of-sequence id is vocab_size; task tag ids follow it, one per kind.
"""

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from .encoder import SpeechUtterance
from .model import PromptLayout
from .seeding import substream

KINDS = ("copy", "shift_vocab", "local_reorder")


def eos_id(vocab_size):
    return vocab_size


def task_tag_id(vocab_size, kind):
    return vocab_size + 1 + KINDS.index(kind)


def model_vocab_size(vocab_size):
    """Data tokens + EOS + one tag per task kind."""
    return vocab_size + 1 + len(KINDS)


@dataclass
class SynthTaskSpec:
    kind: str = "copy"
    vocab_size: int = 64
    seq_len: tuple = (8, 16)  # inclusive range of source lengths
    upsample: int = 16  # raw frames per source token (U)
    noise_std: float = 0.05
    seed: int = 0
    d_in: int = 16
    shift_offset: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be >= 4")
        if self.upsample < 1:
            raise ValueError("upsample must be >= 1")
        self.seq_len = (int(self.seq_len[0]), int(self.seq_len[1]))
        if not 1 <= self.seq_len[0] <= self.seq_len[1]:
            raise ValueError(f"bad seq_len range {self.seq_len}")


@dataclass
class SynthExample:
    utterance: SpeechUtterance
    prompt: PromptLayout
    source: list
    index: int


def oracle_target(spec, source_tokens):
    """Ground-truth target for a source sequence under the task kind."""
    src = list(int(t) for t in source_tokens)
    if spec.kind == "copy":
        return src
    if spec.kind == "shift_vocab":
        return [(t + spec.shift_offset) % spec.vocab_size for t in src]
    out = src[:]
    for i in range(0, len(out) - 1, 2):
        out[i], out[i + 1] = out[i + 1], out[i]
    return out


def render_table(spec):
    """Fixed random embedding per vocabulary id, derived from the seed."""
    rng = substream(spec.seed, "render")
    return rng.normal(0.0, 1.0, size=(spec.vocab_size, spec.d_in))


def _render(spec, table, source, rng):
    frames = np.repeat(table[np.asarray(source, dtype=np.int64)], spec.upsample, axis=0)
    if spec.noise_std > 0:
        frames = frames + spec.noise_std * rng.normal(size=frames.shape)
    return frames


def make_example(spec, index, table=None, source=None):
    """Example ``index`` of the dataset; deterministic per (seed, index)."""
    if table is None:
        table = render_table(spec)
    rng = substream(spec.seed, "example", index)
    lo, hi = spec.seq_len
    n = int(rng.integers(lo, hi + 1))
    drawn = rng.integers(0, spec.vocab_size, size=n)
    if source is None:
        source = [int(t) for t in drawn]
    frames = _render(spec, table, source, rng)
    prompt = PromptLayout(
        context=[task_tag_id(spec.vocab_size, spec.kind)],
        targets=oracle_target(spec, source),
    )
    return SynthExample(
        utterance=SpeechUtterance(frames), prompt=prompt, source=list(source), index=index
    )


def generate(spec, n):
    if n < 1:
        raise ValueError("n must be >= 1")
    table = render_table(spec)
    return [make_example(spec, i, table=table) for i in range(n)]


def nearest_tokens(spec, frames, table=None):
    """Nearest-embedding decoding of frames back to source tokens (noise 0
    rendering makes this exact)."""
    if table is None:
        table = render_table(spec)
    t_raw = frames.shape[0]
    n = t_raw // spec.upsample
    per_tok = frames[: n * spec.upsample].reshape(n, spec.upsample, -1).mean(axis=1)
    d2 = ((per_tok[:, None, :] - table[None, :, :]) ** 2).sum(axis=2)
    return [int(i) for i in np.argmin(d2, axis=1)]


# -----------------------------------------------------------------------------
# Dataset files: line-oriented records; frames are regenerated from the seed
# -----------------------------------------------------------------------------


def save_dataset(path, spec, examples):
    with open(path, "w") as fh:
        header = {"spec": asdict(spec), "n": len(examples)}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for ex in examples:
            src = " ".join(str(t) for t in ex.source)
            tgt = " ".join(str(t) for t in ex.prompt.targets)
            fh.write(f"{ex.index}\t{src}\t{tgt}\n")


def load_dataset(path):
    with open(path) as fh:
        header = json.loads(fh.readline())
        spec = SynthTaskSpec(**header["spec"])
        table = render_table(spec)
        examples = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            idx_s, src_s, tgt_s = line.split("\t")
            source = [int(t) for t in src_s.split()]
            ex = make_example(spec, int(idx_s), table=table, source=source)
            if list(ex.prompt.targets) != [int(t) for t in tgt_s.split()]:
                raise ValueError(f"dataset line {idx_s}: stored target disagrees with oracle")
            examples.append(ex)
    return spec, examples


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()
