"""Run configuration: flat dotted keys with defaults, a diff-friendly text
file format (``policy.K=10`` per line), and output manifests with digests.

Precedence: CLI flag > config file > built-in default.
"""

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__

# Built-in defaults. Training hyperparameters (lr, weight decay, clip, the
# K/L/P policy defaults, and the training K range) follow the reference
# recipe; everything else is desk-scale.
DEFAULTS = {
    "seed": 0,
    "model.d_model": 64,
    "model.n_heads": 4,
    "model.d_ff": 128,
    "model.llm_layers": 4,
    "model.x_layers": 2,
    "model.query_encoder": "causal_self_attention",
    "encoder.mode": "causal",
    "encoder.P": 8,
    "encoder.n_layers": 2,
    "encoder.right_context_frames": 13,
    "encoder.window_index": 3,
    "policy.K": 10,
    "policy.L": 4,
    "train.lr": 1e-4,
    "train.weight_decay": 1e-3,
    "train.clip": 1.0,
    "train.steps": 2000,
    "train.batch": 8,
    "train.stream_fraction": 0.0,
    "train.k_min": 3,
    "train.k_max": 12,
    "train.eval_every": 500,
    "eval.n": 32,
    "eval.max_len": 48,
    "task.kind": "copy",
    "task.vocab": 64,
    "task.seq_lo": 8,
    "task.seq_hi": 16,
    "task.upsample": 16,
    "task.noise": 0.05,
    "task.d_in": 16,
    "gen.n": 512,
    "bench.reps": 7,
}


class ConfigError(ValueError):
    pass


def _coerce(key, raw):
    """Type a raw string by the default's type."""
    default = DEFAULTS[key]
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))

    def __getitem__(self, key):
        return self.values[key]

    def set(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str) and not isinstance(DEFAULTS[key], str):
            value = _coerce(key, value)
        self.values[key] = value

    def as_dict(self):
        return dict(self.values)


def parse_config_file(path):
    """Flat ``key=value`` lines; '#' starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in stripped.split("=", 1))
        out[key] = value
    return out


def resolve_config(config_path=None, overrides=None):
    """Defaults, then the config file, then explicit overrides."""
    cfg = RunConfig()
    if config_path:
        for key, value in parse_config_file(config_path).items():
            cfg.set(key, value)
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg.set(key, value)
    return cfg


# -----------------------------------------------------------------------------
# Manifests
# -----------------------------------------------------------------------------


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, cfg, outputs, wall_clock_s):
    """Record the resolved config and a digest of every produced file."""
    out_dir = Path(out_dir)
    manifest = {
        "version": __version__,
        "config": cfg.as_dict(),
        "outputs": {str(Path(p).name): file_sha256(p) for p in outputs},
        "wall_clock_s": wall_clock_s,
        "written_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def verify_manifest(out_dir):
    """Check every listed output's digest; returns the mismatched names."""
    out_dir = Path(out_dir)
    manifest = json.loads((out_dir / "manifest.json").read_text())
    bad = []
    for name, digest in manifest["outputs"].items():
        p = out_dir / name
        if not p.exists() or file_sha256(p) != digest:
            bad.append(name)
    return bad
