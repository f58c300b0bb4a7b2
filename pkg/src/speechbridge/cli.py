"""Command-line harness: gen, train, eval, stream, sweep, bench, kbench.

Every command resolves its configuration as CLI flag > config file >
built-in default, writes CSV artifacts plus a manifest with content
digests, and is byte-reproducible for a fixed config and seed (timing
columns aside). Failures exit nonzero with a single ``error: ...`` line.
"""

import argparse
import csv
import io
import sys
import time
from pathlib import Path

from . import bench as bench_mod
from . import data as data_mod
from . import kernel_bench
from . import metrics as metrics_mod
from .config import ConfigError, resolve_config, write_manifest
from .encoder import EncoderConfig
from .model import BridgeConfig, ModelConfig, SpeechLM
from .policy import WaitKConfig
from .training import NonFiniteLossError, eval_loss, train_loop


class UsageError(ValueError):
    pass


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def task_spec_from_config(cfg):
    return data_mod.SynthTaskSpec(
        kind=cfg["task.kind"],
        vocab_size=cfg["task.vocab"],
        seq_len=(cfg["task.seq_lo"], cfg["task.seq_hi"]),
        upsample=cfg["task.upsample"],
        noise_std=cfg["task.noise"],
        seed=cfg["seed"],
        d_in=cfg["task.d_in"],
    )


def model_from_config(cfg, spec):
    enc = EncoderConfig(
        mode=cfg["encoder.mode"],
        P=cfg["encoder.P"],
        n_layers=cfg["encoder.n_layers"],
        d_model=cfg["model.d_model"],
        d_in=spec.d_in,
        n_heads=cfg["model.n_heads"],
        d_ff=cfg["model.d_ff"],
        right_context_frames=cfg["encoder.right_context_frames"],
        causal_window_index=cfg["encoder.window_index"],
    )
    mc = ModelConfig(
        vocab_size=data_mod.model_vocab_size(spec.vocab_size),
        eos_id=data_mod.eos_id(spec.vocab_size),
        d_model=cfg["model.d_model"],
        n_heads=cfg["model.n_heads"],
        d_ff=cfg["model.d_ff"],
        llm_layers=cfg["model.llm_layers"],
        bridge=BridgeConfig(x_layers=cfg["model.x_layers"], query_encoder=cfg["model.query_encoder"]),
        encoder=enc,
    )
    return SpeechLM(mc, seed=cfg["seed"])


def _prepare_out(out, force=False, must_be_fresh=False):
    out = Path(out)
    if must_be_fresh and out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _held_out_examples(spec, start, n):
    table = data_mod.render_table(spec)
    return [data_mod.make_example(spec, i, table=table) for i in range(start, start + n)]


# -----------------------------------------------------------------------------
# Commands
# -----------------------------------------------------------------------------


def cmd_gen(args):
    cfg = resolve_config(args.config, {"seed": args.seed, "gen.n": args.n})
    if cfg["gen.n"] < 1:
        raise UsageError("--n must be >= 1")
    t0 = time.time()
    out = _prepare_out(args.out, force=args.force, must_be_fresh=True)
    spec = task_spec_from_config(cfg)
    examples = data_mod.generate(spec, cfg["gen.n"])
    dataset = out / "dataset.txt"
    data_mod.save_dataset(dataset, spec, examples)
    write_manifest(out, cfg, [dataset], time.time() - t0)
    print(f"wrote {dataset} ({len(examples)} examples)")
    return 0


def _train_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["step", "loss", "eval_loss", "eval_acc"])
    for r in rows:
        em = r.eval_metric or {}
        writer.writerow(
            [r.step, _fmt(r.loss), _fmt(em.get("eval_loss")), _fmt(em.get("eval_acc"))]
        )
    return buf.getvalue()


def cmd_train(args):
    cfg = resolve_config(args.config, {"seed": args.seed, "train.steps": args.steps})
    t0 = time.time()
    out = _prepare_out(args.out)
    spec, examples = data_mod.load_dataset(args.data)
    eval_examples = _held_out_examples(spec, len(examples), cfg["eval.n"])

    if args.init_from:
        model = SpeechLM.load(args.init_from)
    else:
        model = model_from_config(cfg, spec)

    max_len = cfg["eval.max_len"]
    ckpt = out / "checkpoint.npz"
    loss_csv = out / "loss.csv"

    def eval_fn(m):
        # checkpoint at every eval point so a later NaN abort keeps the
        # last-good parameters on disk
        m.save(ckpt)
        return {
            "eval_loss": eval_loss(m, eval_examples),
            "eval_acc": metrics_mod.evaluate_offline(m, eval_examples, max_len),
        }
    try:
        rows, _ = train_loop(
            model,
            examples,
            steps=cfg["train.steps"],
            batch_size=cfg["train.batch"],
            seed=cfg["seed"],
            lr=cfg["train.lr"],
            weight_decay=cfg["train.weight_decay"],
            clip_norm=cfg["train.clip"],
            k_range=(cfg["train.k_min"], cfg["train.k_max"]),
            stream_fraction=cfg["train.stream_fraction"],
            waitk_L=cfg["policy.L"],
            eval_every=cfg["train.eval_every"],
            eval_fn=eval_fn,
        )
    except NonFiniteLossError as exc:
        # keep the last-good checkpoint (if any) and the loss curve so far
        loss_csv.write_text(_train_csv(exc.rows))
        raise RuntimeError(f"aborted on non-finite loss; last-good checkpoint kept: {exc}") from exc
    model.save(ckpt)
    loss_csv.write_text(_train_csv(rows))
    write_manifest(out, cfg, [ckpt, loss_csv], time.time() - t0)
    final = rows[-1]
    acc = (final.eval_metric or {}).get("eval_acc")
    print(f"trained {cfg['train.steps']} steps; final loss {final.loss:.4f}"
          + (f", eval acc {acc:.4f}" if acc is not None else ""))
    return 0


def _eval_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["mode", "K", "quality", "laal_ms", "n"])
    for r in rows:
        writer.writerow([r["mode"], _fmt(r.get("K")), _fmt(r["quality"]), _fmt(r.get("laal_ms")), r["n"]])
    return buf.getvalue()


def _run_eval(args, stream_traces=False):
    mode = getattr(args, "mode", "stream" if stream_traces else None)
    if mode not in ("offline", "stream"):
        raise UsageError("--mode must be 'offline' or 'stream'")
    if mode == "stream" and args.k is None:
        raise UsageError("--k is required when mode is 'stream'")
    cfg = resolve_config(args.config, {"seed": args.seed, "policy.K": args.k})
    t0 = time.time()
    out = _prepare_out(args.out)
    spec, examples = data_mod.load_dataset(args.data)
    model = SpeechLM.load(args.checkpoint)
    max_len = cfg["eval.max_len"]
    if mode == "offline":
        quality = metrics_mod.evaluate_offline(model, examples, max_len)
        row = {"mode": "offline", "K": None, "quality": quality, "laal_ms": None, "n": len(examples)}
    else:
        wk = WaitKConfig(K=cfg["policy.K"], L=cfg["policy.L"], P=cfg["encoder.P"])
        trace_dir = None
        if stream_traces:
            trace_dir = out / "traces"
            trace_dir.mkdir(exist_ok=True)
        quality, lag = metrics_mod.evaluate_stream(
            model, examples, wk, max_len, trace_dir=str(trace_dir) if trace_dir else None
        )
        row = {"mode": "stream", "K": wk.K, "quality": quality, "laal_ms": lag, "n": len(examples)}
    metrics_csv = out / "metrics.csv"
    metrics_csv.write_text(_eval_csv([row]))
    write_manifest(out, cfg, [metrics_csv], time.time() - t0)
    print(f"{row['mode']} quality {row['quality']:.4f}"
          + (f", laal {row['laal_ms']:.1f} ms" if row["laal_ms"] is not None else ""))
    return 0


def cmd_eval(args):
    return _run_eval(args, stream_traces=False)


def cmd_stream(args):
    args.mode = "stream"
    return _run_eval(args, stream_traces=True)


def _parse_ks(text):
    if not text:
        return []
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" in part:
            lo, hi = part.split(":")
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return sorted(set(out))


def cmd_sweep(args):
    ks = _parse_ks(args.ks)
    if not ks:
        raise UsageError("--ks must name at least one K (e.g. 3:12 or 3,6,10)")
    cfg = resolve_config(args.config, {"seed": args.seed})
    t0 = time.time()
    out = _prepare_out(args.out)
    spec, examples = data_mod.load_dataset(args.data)
    model = SpeechLM.load(args.checkpoint)
    wk = WaitKConfig(K=max(ks), L=cfg["policy.L"], P=cfg["encoder.P"])
    points = metrics_mod.sweep_k(
        model,
        examples,
        ks,
        wk,
        cfg["eval.max_len"],
        forced=args.forced,
        trained_k_range=(cfg["train.k_min"], cfg["train.k_max"]),
    )
    sweep_csv = out / "tradeoff.csv"
    sweep_csv.write_text(metrics_mod.tradeoff_csv(points))
    outputs = [sweep_csv]
    warns = [w for p in points for w in p.warnings]
    if warns:
        warn_path = out / "warnings.txt"
        warn_path.write_text("\n".join(warns) + "\n")
        outputs.append(warn_path)
        for w in warns:
            print(f"warning: {w}", file=sys.stderr)
    write_manifest(out, cfg, outputs, time.time() - t0)
    print(f"swept K={ks[0]}..{ks[-1]} over {len(examples)} examples -> {sweep_csv}")
    return 0


def _parse_grid(text):
    if not text:
        return bench_mod.DEFAULT_GRID
    grid = []
    for part in text.split(","):
        lt, la = part.strip().lower().split("x")
        grid.append((int(lt), int(la)))
    return tuple(grid)


def cmd_bench(args):
    cfg = resolve_config(args.config, {"seed": args.seed, "bench.reps": args.reps})
    t0 = time.time()
    out = _prepare_out(args.out)
    grid = _parse_grid(args.grid)
    results = bench_mod.run_bench(
        grid,
        d_model=cfg["model.d_model"],
        n_layers_llm=cfg["model.llm_layers"],
        x_layers=cfg["model.x_layers"],
        n_heads=cfg["model.n_heads"],
        repetitions=cfg["bench.reps"],
        seed=cfg["seed"],
    )
    csv_text, summary = bench_mod.report(results)
    bench_csv = out / "bench.csv"
    bench_csv.write_text(csv_text)
    summary_path = out / "summary.txt"
    summary_path.write_text(summary + "\n")
    write_manifest(out, cfg, [bench_csv, summary_path], time.time() - t0)
    print(summary)
    return 0


def cmd_kbench(args):
    t0 = time.time()
    out = _prepare_out(args.out)
    cfg = resolve_config(args.config, {"seed": args.seed})
    rows = kernel_bench.run(seed=cfg["seed"])
    csv_text, summary = kernel_bench.report(rows)
    path = out / "kernels.csv"
    path.write_text(csv_text)
    write_manifest(out, cfg, [path], time.time() - t0)
    print(summary)
    return 0


# -----------------------------------------------------------------------------
# Parser
# -----------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="speechbridge", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", default=None, help="config file with key=value lines")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", required=out_required, help="output directory")

    sp = sub.add_parser("gen", help="generate a synthetic dataset")
    common(sp)
    sp.add_argument("--n", type=int, default=None, help="number of examples")
    sp.add_argument("--force", action="store_true", help="allow a non-empty output dir")
    sp.set_defaults(fn=cmd_gen)

    sp = sub.add_parser("train", help="train a model on a dataset")
    common(sp)
    sp.add_argument("--data", required=True, help="dataset file from gen")
    sp.add_argument("--init-from", dest="init_from", default=None, help="checkpoint to continue from")
    sp.add_argument("--steps", type=int, default=None)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--mode", choices=["offline", "stream"], default="offline")
    sp.add_argument("--k", type=int, default=None)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("stream", help="streaming evaluation with per-example trace logs")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--k", type=int, default=None)
    sp.set_defaults(fn=cmd_stream)

    sp = sub.add_parser("sweep", help="latency-quality tradeoff over K")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--ks", required=True, help="comma list or lo:hi range")
    sp.add_argument("--forced", action="store_true", help="forced decoding (latency only)")
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("bench", help="prepend vs cross-attention fusion benchmark")
    common(sp)
    sp.add_argument("--grid", default=None, help='grid like "16x128,16x256"')
    sp.add_argument("--reps", type=int, default=None)
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("kbench", help="numba vs numpy kernel micro-benchmark")
    common(sp)
    sp.set_defaults(fn=cmd_kbench)

    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
