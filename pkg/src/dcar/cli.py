"""``dcar`` command line: data -> CAR training -> profiling -> DCPO -> evaluation -> analysis.

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 validation error,
5 numeric failure. Set ``DCAR_VERBOSE=1`` for progress logging.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .checkpoint import CheckpointError, load_model, load_policy, save_model, save_policy
from .config import ConfigError, RunConfig
from .dcpo import RewardCollapse, ablation, train_dcpo
from .decode import DecodeError, decode_car, decode_dcar, decode_far
from .evalsuite import (EvalError, analyze_heads, evaluate, export_attention, merge_reports,
                        parse_method, profile_guidance)
from .model import CarModel, SequenceError
from .policy import SchedulerPolicy
from .tensor import NumericError
from .train import train_car
from .world import (SPLITS, WorldError, generate, load_corpus, prompt_length, rng_stream,
                    transcribe, write_corpus)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3, 4, 5

log = logging.getLogger("dcar")


class ValidationError(ValueError):
    pass


# ------------------------------------------------------------ helpers

def version_string() -> str:
    """``git describe`` when run from a checkout, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"],
                             cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_run_manifest(out: Path, command: str, cfg: RunConfig, started: float, extra: dict | None = None) -> None:
    write_json(out / "run_manifest.json", {
        "command": command, "config": cfg.to_dict(), "config_hash": cfg.digest(),
        "version": version_string(), "seed": cfg.seed,
        "wall_time": time.perf_counter() - started, **(extra or {})})


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.validate()
    return cfg


def check_world(cfg: RunConfig, world_dict: dict, what: str) -> None:
    if cfg.world_config().to_dict() != world_dict:
        raise ValidationError(f"{what} was built for a different world config than --config describes")


def load_data(cfg: RunConfig, data_dir):
    corpus = load_corpus(data_dir)
    check_world(cfg, corpus.world.to_dict(), f"dataset {data_dir}")
    return corpus


def load_base(cfg: RunConfig, path) -> CarModel:
    model, manifest = load_model(path)
    if "world" in manifest["config"]:
        check_world(cfg, manifest["config"]["world"], f"checkpoint {path}")
    return model


def load_sched(path) -> tuple[SchedulerPolicy, dict]:
    policy, manifest = load_policy(path)
    return policy, manifest["config"]


# ------------------------------------------------------------ commands

def cmd_gen_data(args, cfg: RunConfig, t0: float) -> int:
    out = Path(args.out)
    hashes = write_corpus(out, cfg.world_config(), cfg.corpus_spec())
    write_run_manifest(out, "gen-data", cfg, t0, {"sha256": hashes})
    print(json.dumps({"out": str(out), "sha256": hashes}, indent=2))
    return EXIT_OK


def cmd_train_car(args, cfg: RunConfig, t0: float) -> int:
    corpus = load_data(cfg, args.data)
    world = corpus.world
    model = CarModel(cfg.model_config(world.symbol_count, world.token_vocab))
    logs = train_car(model, corpus["train"], corpus["eval"], cfg.train_config(),
                     on_epoch=lambda e: log.info("epoch %s", e))
    out = Path(args.out)
    save_model(out, model, {"world": world.to_dict(), "run_config": cfg.to_dict()})
    write_json(out / "train_log.json", logs)
    write_run_manifest(out, "train-car", cfg, t0)
    last = logs[-1]
    print(f"epoch {last['epoch']}: eval loss {last['eval_loss']:.4f}, "
          f"head accuracy {[round(a, 4) for a in last['eval_accuracy']]}")
    return EXIT_OK


def cmd_profile(args, cfg: RunConfig, t0: float) -> int:
    corpus = load_data(cfg, args.data)
    model = load_base(cfg, args.model)
    sizes = [int(s) for s in args.sizes.split(",")] if args.sizes else list(range(1, model.cfg.n_heads_total + 1))
    k = args.k if args.k is not None else cfg.eval.profile_k
    split = corpus[args.split or cfg.eval.profile_split]
    report = profile_guidance(model, split, sizes, k, cfg.sampling(), corpus.world, cfg.decode.max_len)
    out = Path(args.out)
    write_json(out / "profile.json", report.to_json())
    write_run_manifest(out, "profile-chunks", cfg, t0)
    print(report.table())
    print(f"guidance C = {list(report.selected)}")
    return EXIT_OK


def _guidance(args, cfg: RunConfig) -> tuple[int, ...]:
    if args.guidance:
        return tuple(int(c) for c in args.guidance.split(","))
    if args.profile:
        return tuple(json.loads(Path(args.profile, "profile.json").read_text())["selected"])
    return tuple(cfg.dcpo.guidance)


def cmd_train_dcpo(args, cfg: RunConfig, t0: float) -> int:
    corpus = load_data(cfg, args.data)
    model = load_base(cfg, args.model)
    guidance = _guidance(args, cfg)
    try:
        dcfg = ablation(cfg.dcpo_config(guidance), args.ablate)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    actions = tuple(range(1, model.cfg.n_heads_total + 1))
    policy = SchedulerPolicy(cfg.policy_config(actions, model.cfg.d_model))
    logs = train_dcpo(model, policy, corpus["policy"], dcfg, cfg.sampling(), corpus.world,
                      on_epoch=lambda e: log.info("epoch %s", e))
    out = Path(args.out)
    save_policy(out, policy, {"guidance": list(dcfg.guidance), "ablation": args.ablate,
                              "world": corpus.world.to_dict(), "run_config": cfg.to_dict()})
    write_json(out / "dcpo_log.json", logs)
    write_run_manifest(out, "train-dcpo", cfg, t0, {"ablation": args.ablate})
    for e in logs:
        print(f"epoch {e['epoch']}: beta {e['beta']:.1f} mean reward {e['mean_reward']:.4f} "
              f"in-range {e['in_range_fraction']:.3f} mean chunk {e['mean_chunk']:.2f}")
    return EXIT_OK


def cmd_synth(args, cfg: RunConfig, t0: float) -> int:
    model = load_base(cfg, args.model)
    world = cfg.world_config()
    text = [int(s) for s in args.text.split()]
    reference = generate(text, world, rng_stream(cfg.seed, "synth", args.text))
    prompt = reference[: prompt_length(len(reference) - 1, world)]
    kind, size = parse_method(args.method)
    sampling = cfg.sampling()
    if kind == "far":
        tr = decode_far(model, text, prompt, sampling, cfg.decode.max_len, "synth")
    elif kind == "car":
        tr = decode_car(model, text, prompt, size, sampling, cfg.decode.max_len, "synth")
    else:
        if not args.policy:
            raise ValidationError("dcar synthesis needs --policy")
        policy, _ = load_sched(args.policy)
        tr = decode_dcar(model, policy, text, prompt, sampling, cfg.eval.policy_mode, cfg.decode.max_len, "synth")
    heard = transcribe(list(prompt) + tr.tokens, world)
    result = {"text": text, "prompt": list(prompt), "tokens": tr.tokens, "chunk_sizes": tr.chunk_sizes,
              "transcript": list(heard.symbols), "steps": tr.steps, "eos": tr.eos}
    print(json.dumps(result))
    if args.out:
        out = Path(args.out)
        write_json(out / "synth.json", result)
        write_run_manifest(out, "synth", cfg, t0)
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig, t0: float) -> int:
    corpus = load_data(cfg, args.data)
    model = load_base(cfg, args.model)
    methods = args.methods.split(",") if args.methods else list(cfg.eval.methods)
    for m in methods:
        parse_method(m)
    policy, guidance = None, None
    if args.policy:
        policy, pcfg = load_sched(args.policy)
        guidance = pcfg.get("guidance")
    elif any(parse_method(m)[0] == "dcar" for m in methods):
        raise ValidationError("method dcar needs --policy")
    report = evaluate(model, policy, corpus[args.split or cfg.eval.split], methods, cfg.sampling(),
                      corpus.world, cfg.decode.max_len, cfg.eval.policy_mode, guidance,
                      cfg.eval.transcribe_noise)
    out = Path(args.out)
    report.write(out)
    write_run_manifest(out, "eval", cfg, t0, {"world": corpus.world.to_dict()})
    print(report.table())
    return EXIT_OK


def cmd_analyze_heads(args, cfg: RunConfig, t0: float) -> int:
    corpus = load_data(cfg, args.data)
    model = load_base(cfg, args.model)
    split = corpus[args.split]
    if args.limit:
        split = split[: args.limit]
    mat = analyze_heads(model, split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mat.export(out / "head_ranks.bin")
    summary = mat.summary()
    write_json(out / "head_summary.json", summary)
    write_run_manifest(out, "analyze-heads", cfg, t0)
    print(f"columns {summary['columns']}: base best {summary['base_best']:.4f}, "
          f"base worst {summary['base_worst']:.4f}")
    print("best fraction per head:", [round(x, 4) for x in summary["best_fraction"]])
    return EXIT_OK


def cmd_export_attention(args, cfg: RunConfig, t0: float) -> int:
    corpus = load_data(cfg, args.data)
    model = load_base(cfg, args.model)
    utts = corpus[args.split]
    if not 0 <= args.index < len(utts):
        raise ValidationError(f"--index must lie in [0, {len(utts) - 1}]")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = export_attention(model, utts[args.index], out / "attention.bin")
    write_run_manifest(out, "export-attention", cfg, t0)
    print(f"wrote {len(header['maps'])} maps for {header['id']} (text_len {header['text_len']})")
    return EXIT_OK


def cmd_report(args, cfg: RunConfig | None, t0: float) -> int:
    runs = []
    for d in args.runs:
        d = Path(d)
        manifest = json.loads((d / "run_manifest.json").read_text())
        runs.append({"world": manifest.get("world"), "config_hash": manifest["config_hash"],
                     "eval": json.loads((d / "eval.json").read_text()),
                     "timing": json.loads((d / "timing.json").read_text())})
    try:
        rows = merge_reports(runs)
    except EvalError as e:
        raise ValidationError(str(e)) from None
    head = f"{'Method':<8} {'Config':<16} {'Avg.Token':>9} {'WER(%)':>7} {'RTF':>8} {'Speedup':>8}"
    print(head)
    print("-" * len(head))
    for r in rows:
        sp = f"{r['speedup']:.2f}x" if r["speedup"] is not None else "-"
        print(f"{r['method']:<8} {r['config_hash']:<16} {r['avg_token']:>9.2f} {r['wer']:>7.2f} "
              f"{r['rtf']:>8.4f} {sp:>8}")
    if args.out:
        write_json(Path(args.out) / "report.json", {"rows": rows})
    return EXIT_OK


# ------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dcar", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, data=True, model=True, out=True):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        sp.add_argument("--config", help="run config JSON (defaults for every missing key)")
        sp.add_argument("--seed", type=int, help="override the config's global seed")
        sp.add_argument("--threads", type=int, default=1, help="BLAS threads (1 = bit-reproducible)")
        if data:
            sp.add_argument("--data", required=True, help="dataset directory from gen-data")
        if model:
            sp.add_argument("--model", required=True, help="base checkpoint directory")
        if out:
            sp.add_argument("--out", required=True, help="output directory")
        return sp

    add("gen-data", cmd_gen_data, "generate train/eval/policy splits", data=False, model=False)
    add("train-car", cmd_train_car, "train the multi-head base model", model=False)
    sp = add("profile-chunks", cmd_profile, "rank fixed chunk sizes by WER and pick C")
    sp.add_argument("--k", type=int, help="size of the guidance set")
    sp.add_argument("--sizes", help="comma-separated candidate sizes (default 1..N+1)")
    sp.add_argument("--split", choices=SPLITS)
    sp = add("train-dcpo", cmd_train_dcpo, "train the chunk-size policy")
    sp.add_argument("--guidance", help="comma-separated guidance set C")
    sp.add_argument("--profile", help="profile-chunks output directory supplying C")
    sp.add_argument("--ablate", choices=["no-guidance", "no-outrange-penalty", "totally-free"])
    sp = add("synth", cmd_synth, "decode one text and print tokens plus transcript", data=False)
    sp.set_defaults(out=None)
    for a in sp._actions:
        if a.dest == "out":
            a.required = False
    sp.add_argument("--text", required=True, help='space-separated symbol ids, e.g. "1 4 2"')
    sp.add_argument("--method", default="far", help="far | car:<c> | dcar")
    sp.add_argument("--policy", help="policy checkpoint (for dcar)")
    sp = add("eval", cmd_eval, "compare decoding methods on a split")
    sp.add_argument("--methods", help="e.g. far,car:2,car:3,dcar")
    sp.add_argument("--policy", help="policy checkpoint (required for dcar)")
    sp.add_argument("--split", choices=SPLITS)
    sp = add("analyze-heads", cmd_analyze_heads, "teacher-forced per-head loss ranking")
    sp.add_argument("--split", choices=SPLITS, default="eval")
    sp.add_argument("--limit", type=int, help="only the first LIMIT utterances")
    sp = add("export-attention", cmd_export_attention, "dump attention maps of one utterance")
    sp.add_argument("--split", choices=SPLITS, default="eval")
    sp.add_argument("--index", type=int, default=0)
    sp = sub.add_parser("report", help="merge eval runs into one table")
    sp.set_defaults(fn=cmd_report)
    sp.add_argument("--runs", nargs="+", required=True, help="eval output directories")
    sp.add_argument("--out", help="write report.json here")
    sp.add_argument("--threads", type=int, default=1)
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if os.environ.get("DCAR_VERBOSE") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    t0 = time.perf_counter()
    try:
        cfg = load_config(args) if args.command != "report" else None
        with threadpool_limits(limits=max(args.threads, 1)):
            return args.fn(args, cfg, t0)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError, RewardCollapse) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, CheckpointError, EvalError, DecodeError, SequenceError, WorldError) as e:
        print(f"validation error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, json.JSONDecodeError, KeyError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"validation error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
