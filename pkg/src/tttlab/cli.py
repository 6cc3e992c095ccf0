"""``tttlab`` command line: verify, train, bench, gen, parse, assemble.

Exit codes: 0 success, 1 verification failure, 2 configuration or input error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .models import VARIANTS
from .report import ConfigError, Run, RunConfig, emit_report, load_config

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--variant", choices=VARIANTS, default=None)
    p.add_argument("--T", type=int, default=None, help="sequence length")
    p.add_argument("--d", type=int, default=None, help="model width")
    p.add_argument("--k", type=int, default=None, help="TTT/recurrent key width (default d)")
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--b", type=int, default=None, help="inner-loop mini-batch size (default 64)")
    p.add_argument("--eta", type=float, default=None, help="inner-loop learning rate (default per variant)")
    p.add_argument("--shards", type=int, default=None, help="tensor-parallel workers")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--profile", choices=("toy", "full-scale"), default=None)
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--config", default=None, help="JSON config file (CLI flags override it)")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    ap = argparse.ArgumentParser(prog="tttlab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="subcommand", required=True)

    v = sub.add_parser("verify", parents=[common], help="run a self-check suite")
    v.add_argument("suite", choices=("grad", "scan", "shard", "mask", "pipeline", "all"))
    v.add_argument("--instances", type=int, default=None, help="random instances per property")

    t = sub.add_parser("train", parents=[common], help="train a toy model on a synthetic task")
    t.add_argument("--task", choices=("copy", "recall"), default=None)
    t.add_argument("--n-pairs", type=int, default=None)
    t.add_argument("--segments", type=int, default=None)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--lr", type=float, default=None, help="learning rate of both parameter groups (default 1e-2)")
    t.add_argument("--batch", type=int, default=None)
    t.add_argument("--plots", action="store_true")

    b = sub.add_parser("bench", parents=[common], help="wall-time scaling benchmark")
    b.add_argument("--variants", nargs="+", choices=VARIANTS, default=None)
    b.add_argument("--lengths", nargs="+", type=int, default=None, help="sequence lengths (default 256..2048)")
    b.add_argument("--repeats", type=int, default=None)
    b.add_argument("--shard-counts", nargs="+", type=int, default=None,
                   help="also time the sharded TTT-MLP scan at these worker counts")
    b.add_argument("--plots", action="store_true")

    g = sub.add_parser("gen", parents=[common], help="write a synthetic dataset")
    g.add_argument("--task", choices=("copy", "recall"), default=None)
    g.add_argument("--n-pairs", type=int, default=None)
    g.add_argument("--segments", type=int, default=None)
    g.add_argument("--examples", type=int, default=None)

    pa = sub.add_parser("parse", parents=[common], help="parse a storyboard or prompt file")
    pa.add_argument("file")

    asm = sub.add_parser("assemble", parents=[common], help="storyboard -> token sequence dump")
    asm.add_argument("file")
    return ap


DEFAULTS = {
    "train": {"variant": "ttt-mlp", "T": 128, "d": 16, "b": 16, "task": "recall", "n_pairs": 24,
              "segments": 4, "steps": 300, "lr": 1e-2, "batch": 8},
    "bench": {"variant": "ttt-mlp", "d": 64, "b": 64, "repeats": 5, "lengths": [256, 512, 1024, 2048]},
    "gen": {"task": "recall", "T": 128, "n_pairs": 24, "segments": 4, "examples": 256},
}


def resolve(args: argparse.Namespace) -> RunConfig:
    """Merge defaults, the config file and CLI flags (in increasing priority) into a RunConfig."""
    cmd = args.subcommand
    merged = dict(DEFAULTS.get(cmd, {}))
    if args.config:
        raw = load_config(args.config, cmd)
        raw.pop("subcommand", None)
        task = raw.pop("task", {}) or {}
        extra = raw.pop("extra", {}) or {}
        merged.update(task)
        merged.update(extra)
        merged.update(raw)
    for k, val in vars(args).items():
        if val is not None and k not in ("subcommand", "config", "file", "suite", "plots"):
            merged[k] = val
    rc = RunConfig(
        subcommand=cmd,
        variant=merged.pop("variant", "ttt-mlp"),
        d=merged.pop("d", 16), k=merged.pop("k", None), heads=merged.pop("heads", 1),
        hidden_mult=merged.pop("hidden_mult", 4), b=merged.pop("b", 64), eta=merged.pop("eta", None),
        profile=merged.pop("profile", "toy"), n_shards=merged.pop("shards", merged.pop("n_shards", 1)),
        seed=merged.pop("seed", 0), out=merged.pop("out", None),
    )
    task_keys = ("task", "T", "n_pairs", "segments", "examples")
    rc.task = {k: merged.pop(k) for k in task_keys if k in merged}
    rc.extra = merged
    try:
        return rc.validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _out(rc: RunConfig) -> Path:
    return Path(rc.out or "tttlab-out")


def cmd_verify(args, rc: RunConfig) -> int:
    from .verify import SUITES, verify
    suites = SUITES if args.suite == "all" else (args.suite,)
    ok = True
    for s in suites:
        rep = verify(s, seed=rc.seed, n_instances=rc.extra.get("instances"))
        for c in rep.checks:
            print(f"{'PASS' if c.passed else 'FAIL'}  {c.name:55s} observed={c.observed:.3g} tol={c.tolerance:.3g}")
        if rc.out:
            Path(rc.out).mkdir(parents=True, exist_ok=True)
            rep.write_csv(Path(rc.out) / f"verify-{s}-{rc.hash()}.csv")
        ok &= rep.passed
        if not rep.passed:
            print(f"suite {s}: FAILED ({', '.join(c.name for c in rep.failures())})", file=sys.stderr)
    return EXIT_OK if ok else EXIT_FAIL


def _task(rc: RunConfig):
    from .tasks import CopyTask, RecallTask
    t = rc.task
    if t.get("task", "recall") == "copy":
        T = t.get("T", 33)
        if T % 2 == 0:
            raise ConfigError("copy needs an odd --T")
        return CopyTask((T - 1) // 2)
    try:
        return RecallTask(t.get("T", 128), t.get("n_pairs", 24), n_segments=t.get("segments", 4))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_train(args, rc: RunConfig) -> int:
    from .training import TrainingDiverged, toy_schedule, train_toy
    task = _task(rc)
    x = rc.extra
    schedule = toy_schedule(task.T, x.get("steps", 300), x.get("lr", 1e-2), x.get("lr", 1e-2))
    kw = {"d": rc.d, "k": rc.k, "heads": rc.heads, "hidden_mult": rc.hidden_mult, "b": rc.b, "eta": rc.eta}
    try:
        rep = train_toy(rc.variant, task, schedule, seed=rc.seed, batch_size=x.get("batch", 8),
                        model_kwargs=kw, log=print)
    except TrainingDiverged as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_FAIL
    run = Run(rc, "train")
    run.add_table("losses", [{"variant": rc.variant, **r} for r in rep.losses], ("variant", "step", "loss"))
    run.add_table("evals", [{"variant": rc.variant, **r} for r in rep.evals], ("variant", "step", "accuracy"))
    for p in emit_report(run, _out(rc), plots=args.plots):
        print(p)
    return EXIT_OK


def cmd_bench(args, rc: RunConfig) -> int:
    from .bench import TIMING_COLUMNS, throughput_bench
    x = rc.extra
    variants = x.get("variants") or ([rc.variant] if args.variant else list(VARIANTS))
    lengths = [rc.task["T"]] if "T" in rc.task and not x.get("lengths") else x.get("lengths")
    try:
        rows = throughput_bench(variants, lengths, repeats=x.get("repeats", 5), d=rc.d, seed=rc.seed,
                                b=rc.b, eta=rc.eta, k=rc.k)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    run = Run(rc, "bench")
    run.add_table("timing", rows, TIMING_COLUMNS)
    if x.get("shard_counts"):
        from .sharded import shard_bench
        from .ttt import TTTConfig
        cfg = TTTConfig(rc.d, rc.k, "mlp", hidden_mult=rc.hidden_mult, b=rc.b, eta=rc.eta)
        run.add_table("shards", shard_bench(cfg, x["shard_counts"], lengths, x.get("repeats", 5), rc.seed),
                      ("variant", "T", "n_shards", "mean_ms", "std_ms"))
    for r in rows:
        print(f"{r['variant']:12s} T={r['T']:6d} median={r['median_ms']:9.2f} ms  slope={r['slope']:.2f}")
    for p in emit_report(run, _out(rc), plots=args.plots):
        print(p)
    return EXIT_OK


def cmd_gen(args, rc: RunConfig) -> int:
    task = _task(rc)
    batch = task.sample(np.random.default_rng(rc.seed), rc.task.get("examples", 256))
    out = _out(rc)
    out.mkdir(parents=True, exist_ok=True)
    stem = out / f"{task.kind}-{rc.hash()}"
    batch.tokens.astype("<i4").tofile(f"{stem}.tokens.bin")
    batch.targets.astype("<i4").tofile(f"{stem}.targets.bin")
    meta = {"task": task.describe(), "shape": list(batch.tokens.shape), "vocab_size": task.vocab_size,
            "seed": rc.seed}
    if task.kind == "recall":
        st = task.stats(batch)
        meta.update({k: st[k] for k in ("min_distance", "max_distance", "mean_distance")})
    Path(f"{stem}.json").write_text(json.dumps(meta, indent=2, default=str) + "\n")
    print(stem)
    return EXIT_OK


def _read(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


def cmd_parse(args, rc: RunConfig) -> int:
    from .pipeline import FreeTextPrompt, parse_prompt
    res = parse_prompt(_read(args.file))
    if isinstance(res, FreeTextPrompt):
        print(json.dumps({"format": res.format, "sentences": len(res.sentences), "scene_hints": res.scene_hints}))
    else:
        print(json.dumps({"format": 3, "scenes": len(res.scenes), "paragraphs": [len(s) for s in res.scenes]}))
    return EXIT_OK


def cmd_assemble(args, rc: RunConfig) -> int:
    from .pipeline import PROFILES, assemble_sequence, parse_storyboard, write_sequence
    seq = assemble_sequence(parse_storyboard(_read(args.file)), PROFILES[rc.profile])
    out = _out(rc)
    out.mkdir(parents=True, exist_ok=True)
    for p in write_sequence(seq, out / f"{Path(args.file).stem}-{rc.profile}"):
        print(p)
    print(f"{len(seq)} tokens in {seq.n_segments} segments")
    return EXIT_OK


COMMANDS = {"verify": cmd_verify, "train": cmd_train, "bench": cmd_bench, "gen": cmd_gen,
            "parse": cmd_parse, "assemble": cmd_assemble}


def main(argv=None) -> int:
    from .pipeline import StoryboardError
    args = build_parser().parse_args(argv)
    try:
        rc = resolve(args)
        return COMMANDS[args.subcommand](args, rc)
    except (ConfigError, StoryboardError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
