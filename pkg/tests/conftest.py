"""Session fixtures: the two trained pipelines the acceptance suite shares.

Training runs once per session through the CLI itself, so the acceptance
criteria exercise the same entry points a user would.
"""

import time

import pytest

from speechbridge import data as data_mod
from speechbridge.cli import main
from speechbridge.model import SpeechLM

COPY_CFG = """
# desk-scale copy task (ASR stand-in)
task.kind = copy
task.vocab = 64
task.upsample = 16
task.seq_lo = 8
task.seq_hi = 16
gen.n = 512
train.steps = 2000
train.lr = 3e-4          # default 1e-4 needs more than 2000 steps at this scale
eval.n = 32
"""

COPY_CONT_CFG = """
train.steps = 1000
train.lr = 3e-4
train.stream_fraction = 0.5
eval.n = 32
"""

REORDER_CFG = """
# local_reorder task (translation stand-in): one READ spans 2/3 of a source
# token, so small K is information-starved while K=12 stays complete
task.kind = local_reorder
task.vocab = 64
task.upsample = 48
task.seq_lo = 12
task.seq_hi = 16
gen.n = 512
train.steps = 1500
train.lr = 3e-4
eval.n = 24
"""

REORDER_CONT_CFG = """
train.steps = 1500
train.lr = 3e-4
train.stream_fraction = 0.5
eval.n = 24
"""


def _run(*args):
    rc = main(list(args))
    assert rc == 0, f"command failed: {args}"


def _pipeline(root, base_cfg, cont_cfg, seed="0"):
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "task.cfg"
    cfg.write_text(base_cfg)
    cfg2 = root / "cont.cfg"
    cfg2.write_text(cont_cfg)
    t0 = time.time()
    _run("gen", "--config", str(cfg), "--out", str(root / "data"), "--seed", seed)
    ds = str(root / "data" / "dataset.txt")
    _run("train", "--config", str(cfg), "--data", ds, "--out", str(root / "offline"), "--seed", seed)
    _run(
        "train", "--config", str(cfg2), "--data", ds, "--out", str(root / "stream"),
        "--init-from", str(root / "offline" / "checkpoint.npz"), "--seed", "1",
    )
    wall = time.time() - t0
    spec, examples = data_mod.load_dataset(ds)
    table = data_mod.render_table(spec)
    n_eval = 32 if spec.kind == "copy" else 24
    held_out = [data_mod.make_example(spec, i, table=table) for i in range(len(examples), len(examples) + n_eval)]
    return {
        "root": root,
        "dataset": ds,
        "spec": spec,
        "examples": examples,
        "held_out": held_out,
        "offline_ckpt": root / "offline" / "checkpoint.npz",
        "stream_ckpt": root / "stream" / "checkpoint.npz",
        "offline_model": SpeechLM.load(root / "offline" / "checkpoint.npz"),
        "stream_model": SpeechLM.load(root / "stream" / "checkpoint.npz"),
        "wall_clock_s": wall,
    }


@pytest.fixture(scope="session")
def copy_pipeline(tmp_path_factory):
    return _pipeline(tmp_path_factory.mktemp("copy_task"), COPY_CFG, COPY_CONT_CFG)


@pytest.fixture(scope="session")
def reorder_pipeline(tmp_path_factory):
    return _pipeline(tmp_path_factory.mktemp("reorder_task"), REORDER_CFG, REORDER_CONT_CFG)
