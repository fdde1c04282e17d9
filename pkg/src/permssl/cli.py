"""Command-line driver: ``permssl <command> [flags]``.

Exit codes: 0 success, 1 runtime or check failure, 2 usage error.
Values from ``--config`` (a JSON file with ``data``, ``pretrain`` and
``probe`` sections) are used where a flag is not given; flags win.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__


class UsageError(Exception):
    pass


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    unknown = set(cfg) - {"data", "pretrain", "probe"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _pick(args, cfg: dict, section: str, key: str, default=None, flag: str | None = None):
    value = getattr(args, flag or key)
    if value is not None:
        return value
    return cfg.get(section, {}).get(key, default)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _sidecar(path: Path, config: dict) -> None:
    _write(path.with_name(path.name + ".config.json"), json.dumps(config, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, cfg):
    from .patches import make_dataset

    out = _pick(args, cfg, "data", "out")
    if out is None:
        raise UsageError("gen-data needs --out")
    counts = {s: int(_pick(args, cfg, "data", s, d)) for s, d in (("train", 2000), ("valid", 500), ("test", 500))}
    if min(counts.values()) < 1:
        raise UsageError(f"split counts must be positive, got {counts}")
    F = int(_pick(args, cfg, "data", "F", 64))
    T = int(_pick(args, cfg, "data", "T", 64))
    if F < 8 or T < 2:
        raise UsageError(f"F must be >= 8 and T >= 2, got {F}, {T}")
    seed = int(_pick(args, cfg, "data", "seed", 0))
    effective = {**counts, "F": F, "T": T, "seed": seed}
    return lambda: print(make_dataset(out, counts, seed, F, T, config=effective))


def _pretrain_config(args, cfg):
    from .pretext import PretrainConfig

    sec = cfg.get("pretrain", {})
    fields = {
        "loss": ("loss", None), "epsilon": ("epsilon", None), "mc_samples": ("mc_samples", None),
        "n_x": ("nx", None), "n_y": ("ny", None), "fixed_set_size": ("fixed_set_size", None),
        "epochs": ("epochs", None), "batch_size": ("batch_size", None), "lr": ("lr", None),
        "seed": ("seed", None), "encoder_widths": ("encoder_widths", None), "head_width": ("head_width", None),
    }
    kwargs = {}
    for key, (flag, _) in fields.items():
        value = getattr(args, flag, None)
        if value is None:
            value = sec.get(key)
        if value is not None:
            kwargs[key] = value
    try:
        return PretrainConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def cmd_pretrain(args, cfg):
    from .network import save_checkpoint
    from .patches import NoteArrays, load_split
    from .pretext import pretrain

    data = _pick(args, cfg, "data", "manifest", flag="data")
    out = _pick(args, cfg, "pretrain", "out")
    if data is None or out is None:
        raise UsageError("pretrain needs --data and --out")
    config = _pretrain_config(args, cfg)
    every = args.checkpoint_every
    if every is not None and every < 1:
        raise UsageError("--checkpoint-every must be >= 1")
    out = Path(out)
    metrics_path = Path(args.metrics) if args.metrics else out.with_name(out.name + ".metrics.jsonl")
    effective = {"data": str(data), "pretrain": config.to_dict()}

    def run():
        train = NoteArrays.from_records(load_split(data, "train"))
        try:
            valid = NoteArrays.from_records(load_split(data, "valid"))
        except ValueError:
            valid = None
        metrics_path.parent.mkdir(parents=True, exist_ok=True)
        meta = {"pretrain": config.to_dict(), "data": str(data)}
        with metrics_path.open("w") as fh:
            def on_metrics(rec):
                fh.write(json.dumps(rec.to_dict(args.log_wall_time), sort_keys=True) + "\n")
                fh.flush()

            def on_epoch(epoch, params):
                if every and epoch % every == 0:
                    save_checkpoint(out.with_name(f"{out.stem}.epoch{epoch}{out.suffix}"), params, {**meta, "epoch": epoch})

            params, _ = pretrain(train, config, valid, on_metrics=on_metrics, on_epoch=on_epoch)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out, params, meta)
        _sidecar(metrics_path, effective)
        print(out)

    return run


def _load_model_and_split(model, data, split):
    from .network import load_checkpoint
    from .patches import NoteArrays, load_split
    from .pretext import PretrainConfig

    params, meta = load_checkpoint(model)
    config = PretrainConfig.from_dict(meta["pretrain"])
    return params, config, NoteArrays.from_records(load_split(data, split))


def cmd_evaluate(args, cfg):
    from .pretext import evaluate_pretext

    data = _pick(args, cfg, "data", "manifest", flag="data")
    if args.model is None or data is None:
        raise UsageError("evaluate needs --model and --data")

    def run():
        params, config, records = _load_model_and_split(args.model, data, args.split)
        acc = evaluate_pretext(params, records, config, seed=args.seed)
        row = {"model": str(args.model), "split": args.split, "seed": args.seed, "partial_ranks_accuracy": acc}
        text = json.dumps(row, sort_keys=True) + "\n"
        if args.out:
            _write(Path(args.out), text)
        print(text, end="")

    return run


def _probe_overrides(args, cfg) -> dict:
    sec = cfg.get("probe", {})
    out = {}
    for key, flag in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "lr"), ("hidden", "hidden")):
        value = getattr(args, flag)
        if value is None:
            value = sec.get(key)
        if value is not None:
            out[key] = value
    return out


def cmd_probe(args, cfg):
    from .probe import ProbeConfig, probe_checkpoint, rows_to_jsonl

    data = _pick(args, cfg, "data", "manifest", flag="data")
    if args.model is None or data is None:
        raise UsageError("probe needs --model and --data")
    try:
        config = ProbeConfig(
            task=_pick(args, cfg, "probe", "task", "family"),
            train_size=int(_pick(args, cfg, "probe", "train_size", 500)),
            seed=int(_pick(args, cfg, "probe", "seed", 0)),
            **_probe_overrides(args, cfg),
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None

    def run():
        res = probe_checkpoint(args.model, data, config)
        row = {"model": Path(args.model).stem, "task": res.task, "train_size": res.train_size,
               "seed": res.seed, "metric": res.metric, "value": res.value}
        text = rows_to_jsonl([row])
        if args.out:
            out = Path(args.out)
            _write(out, text)
            _sidecar(out, {"model": str(args.model), "data": str(data), "probe": vars(config) | {"hidden": list(config.hidden)}})
        print(text, end="")

    return run


def cmd_grid(args, cfg):
    from .probe import TASKS, ProbeConfig, rows_to_jsonl, run_experiment_grid, summarize

    data = _pick(args, cfg, "data", "manifest", flag="data")
    if not args.models or data is None or args.out is None:
        raise UsageError("grid needs --models, --data and --out")
    tasks = args.tasks or cfg.get("probe", {}).get("tasks", ["family"])
    sizes = args.train_sizes or cfg.get("probe", {}).get("train_sizes", [500])
    seeds = args.seeds or cfg.get("probe", {}).get("seeds", [0, 1, 2])
    overrides = _probe_overrides(args, cfg)
    try:
        for task in tasks:
            for size in sizes:
                ProbeConfig(task=task, train_size=int(size), **overrides)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)

    def run():
        rows = run_experiment_grid(args.models, data, tasks, sizes, seeds, overrides)
        _write(out.with_suffix(".jsonl"), rows_to_jsonl(rows))
        _write(out.with_suffix(".csv"), summarize(rows))
        _sidecar(out.with_suffix(".jsonl"), {"models": [str(m) for m in args.models], "data": str(data),
                                             "tasks": list(tasks), "train_sizes": list(sizes), "seeds": list(seeds),
                                             "probe": overrides})
        print(out.with_suffix(".csv"))

    return run


def cmd_gradcheck(args, cfg):
    from .checks import run_gradchecks

    if not args.epsilon > 0 or not args.fy_epsilon > 0:
        raise UsageError("--epsilon and --fy-epsilon must be > 0")
    if not 2 <= args.n <= 10:
        raise UsageError("--n must be in [2, 10]")
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")

    def run():
        results = run_gradchecks(args.n, args.epsilon, args.fy_epsilon, args.seed, args.trials)
        for r in results:
            print(r.line())
        failed = [r for r in results if not r.passed]
        print(f"{len(results) - len(failed)}/{len(results)} checks passed")
        return 1 if failed else 0

    return run


def bench_table(min_exp: int, max_exp: int, mc_samples: int, repeats: int, seed: int = 0) -> list[dict]:
    from .softrank import soft_rank_perturbed, soft_rank_reg

    rows = []
    rng = np.random.default_rng(seed)
    for e in range(min_exp, max_exp + 1):
        n = 2 ** e
        theta = rng.normal(size=n)
        reg, pert = [], []
        for _ in range(repeats):
            t0 = time.perf_counter()
            soft_rank_reg(theta, 0.1)
            reg.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            soft_rank_perturbed(theta, 0.5, mc_samples, seed)
            pert.append(time.perf_counter() - t0)
        rows.append({"n": n, "mc_samples": mc_samples, "soft_rank_reg_s": float(np.median(reg)),
                     "soft_rank_perturbed_s": float(np.median(pert))})
    return rows


def cmd_bench(args, cfg):
    if not 1 <= args.min_exp <= args.max_exp <= 24:
        raise UsageError("need 1 <= --min-exp <= --max-exp <= 24")
    if args.mc_samples < 1 or args.repeats < 1:
        raise UsageError("--mc-samples and --repeats must be >= 1")

    def run():
        rows = bench_table(args.min_exp, args.max_exp, args.mc_samples, args.repeats, args.seed)
        lines = ["n,mc_samples,soft_rank_reg_s,soft_rank_perturbed_s"]
        lines += [f"{r['n']},{r['mc_samples']},{r['soft_rank_reg_s']:.6e},{r['soft_rank_perturbed_s']:.6e}" for r in rows]
        text = "\n".join(lines) + "\n"
        if args.out:
            _write(Path(args.out), text)
        print(text, end="")

    return run


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="permssl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    ints = lambda s: [int(x) for x in s.split(",")]

    def common(sp):
        sp.add_argument("--config", help="JSON config with data/pretrain/probe sections")

    g = sub.add_parser("gen-data", help="write a synthetic dataset and manifest")
    common(g)
    g.add_argument("--out")
    g.add_argument("--train", type=int)
    g.add_argument("--valid", type=int)
    g.add_argument("--test", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--F", type=int)
    g.add_argument("--T", type=int)
    g.set_defaults(handler=cmd_gen_data)

    t = sub.add_parser("pretrain", help="pre-train the CFN on permutation inversion")
    common(t)
    t.add_argument("--data", help="dataset manifest.json")
    t.add_argument("--out", help="checkpoint path")
    t.add_argument("--metrics", help="metrics JSONL path (default: <out>.metrics.jsonl)")
    t.add_argument("--loss", choices=["fy", "softrank-mse", "mse-raw", "xe-fixed"])
    t.add_argument("--nx", type=int)
    t.add_argument("--ny", type=int)
    t.add_argument("--epsilon", type=float)
    t.add_argument("--mc-samples", type=int)
    t.add_argument("--fixed-set-size", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--encoder-widths", type=ints)
    t.add_argument("--head-width", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--log-wall-time", action="store_true", help="add wall_time to metrics (not reproducible)")
    t.set_defaults(handler=cmd_pretrain)

    e = sub.add_parser("evaluate", help="pretext partial ranks accuracy of a checkpoint")
    common(e)
    e.add_argument("--model")
    e.add_argument("--data")
    e.add_argument("--split", default="valid")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(handler=cmd_evaluate)

    def probe_flags(sp):
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--hidden", type=ints)

    pr = sub.add_parser("probe", help="train one downstream probe on frozen embeddings")
    common(pr)
    pr.add_argument("--model")
    pr.add_argument("--data")
    pr.add_argument("--task", choices=["family", "instrument", "pitch"])
    pr.add_argument("--train-size", type=int)
    pr.add_argument("--seed", type=int)
    pr.add_argument("--out", help="results JSONL path")
    probe_flags(pr)
    pr.set_defaults(handler=cmd_probe)

    gr = sub.add_parser("grid", help="probe models x tasks x sizes x seeds")
    common(gr)
    gr.add_argument("--models", nargs="+")
    gr.add_argument("--data")
    gr.add_argument("--tasks", nargs="+", choices=["family", "instrument", "pitch"])
    gr.add_argument("--train-sizes", nargs="+", type=int)
    gr.add_argument("--seeds", nargs="+", type=int)
    gr.add_argument("--out", help="output stem; writes <out>.jsonl and <out>.csv")
    probe_flags(gr)
    gr.set_defaults(handler=cmd_grid)

    gc = sub.add_parser("gradcheck", help="finite-difference and oracle checks")
    gc.add_argument("--n", type=int, default=6)
    gc.add_argument("--epsilon", type=float, default=0.1)
    gc.add_argument("--fy-epsilon", type=float, default=0.5)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--trials", type=int, default=20)
    gc.set_defaults(handler=cmd_gradcheck, config=None)

    b = sub.add_parser("bench", help="time the soft rank operators")
    b.add_argument("--min-exp", type=int, default=10)
    b.add_argument("--max-exp", type=int, default=18)
    b.add_argument("--mc-samples", type=int, default=32)
    b.add_argument("--repeats", type=int, default=7)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(handler=cmd_bench, config=None)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        run = args.handler(args, _load_config(args.config))
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"permssl {args.command}: error: {exc}", file=sys.stderr)
        return 2
    try:
        code = run()
    except Exception as exc:  # runtime failures map to exit code 1
        print(f"permssl {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
