"""Command-line entry point.

Exit codes: 0 success, 1 a verification command ran and its check failed,
2 usage error, 3 input/format error, 4 numeric failure (non-finite value).
"""
import argparse
import json
import logging
import os
import sys
import time

from . import __version__
from .analysis import compare, segment_phases, summarize
from .decoding import MODES, DecodingSession, GenerationConfig
from .errors import CacheFullError, ConfigError, NumericalError, WeightsFormatError
from .estimator import EntropySteeredGenerator
from .experiments import SWEEP_COLUMNS, lr_grid, sweep, toy_instance
from .model import ModelConfig, PromptSpec, init_random, load_weights, save_weights
from .trace import dumps, export, read_trace
from .verify import PROPOSITION_KINDS, gradcheck, proposition_harness

logger = logging.getLogger("entropy_steer")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3, 4


def _span(text):
    try:
        a, b = (int(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"video span must look like A:B, got {text!r}") from None
    if not 0 <= a < b:
        raise argparse.ArgumentTypeError(f"video span {text!r} must satisfy 0 <= A < B")
    return a, b


def _csv_ints(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _csv_floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _add_generation_args(p):
    p.add_argument("--mode", choices=MODES, default="vreason")
    p.add_argument("--k", type=int, default=4, help="optimize every k-th generated token")
    p.add_argument("--lr", type=float, default=None, help="controller learning rate (default 3e-4)")
    p.add_argument("--clip", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=0.98)
    p.add_argument("--temperature", type=float, default=0.1)
    p.add_argument("--top-p", type=float, default=0.001)
    p.add_argument("--min-p", type=float, default=None)
    p.add_argument("--keep-ratio", type=float, default=0.5)
    p.add_argument("--max-len", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eos", type=int, default=0, help="EOS token id; negative disables stopping")


def _add_prompt_args(p, required):
    p.add_argument("--weights", required=required)
    p.add_argument("--prompt-tokens", type=_csv_ints, required=required)
    p.add_argument("--video-span", type=_span, required=required)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--output-dir", default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="entropy-steer", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", parents=[common], help="write seeded random toy weights")
    p.add_argument("--out", required=True)
    for name, default in ModelConfig().to_dict().items():
        p.add_argument(f"--{name.replace('_', '-')}", type=int, default=default)

    p = sub.add_parser("generate", parents=[common], help="run one generation and write its trace")
    _add_prompt_args(p, required=True)
    _add_generation_args(p)
    p.add_argument("--trace-out", default=None)
    p.add_argument("--trace-format", choices=("jsonl", "csv"), default="jsonl")
    p.add_argument("--controller-dump", default=None, help="write final controller state here")

    p = sub.add_parser("replay", parents=[common], help="rerun a generate manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--trace-out", required=True)

    p = sub.add_parser("analyze", parents=[common], help="summarize and segment a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--persistence", type=float, default=0.01)
    p.add_argument("--format", choices=("jsonl", "csv"), default="jsonl")

    p = sub.add_parser("compare", parents=[common], help="paired differences between two traces")
    p.add_argument("--trace-a", required=True)
    p.add_argument("--trace-b", required=True)

    p = sub.add_parser("gradcheck", parents=[common], help="analytic vs finite-difference controller gradient")
    _add_prompt_args(p, required=False)
    p.add_argument("--seed", type=int, default=0, help="toy instance seed when --weights is absent")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--delta-scale", type=float, default=0.0)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("props", parents=[common], help="numerical property harnesses")
    p.add_argument("--kind", choices=PROPOSITION_KINDS + ("all",), default="all")
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--beta", type=float, default=0.98)

    p = sub.add_parser("sweep", parents=[common], help="sweep step size or learning rate over seeds")
    _add_prompt_args(p, required=False)
    _add_generation_args(p)
    p.add_argument("--axis", choices=("k", "lr"), required=True)
    p.add_argument("--values", type=_csv_floats, default=None)
    p.add_argument("--seeds", type=int, default=10)
    return parser


def _emit(text, args, filename):
    if args.output_dir:
        os.makedirs(args.output_dir, exist_ok=True)
        path = os.path.join(args.output_dir, filename)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    sys.stdout.write(text)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _generation_config(args):
    if args.mode == "baseline" and args.lr is not None:
        logger.warning("--lr is ignored in baseline mode")
    return GenerationConfig(
        max_length=args.max_len,
        temperature=args.temperature,
        top_p=args.top_p,
        min_p=args.min_p,
        sampler_seed=args.seed,
        step_size=args.k,
        learning_rate=3e-4 if args.lr is None else args.lr,
        clip_norm=args.clip,
        beta=args.beta,
        mode=args.mode,
        keep_ratio=args.keep_ratio,
        eos_id=None if args.eos < 0 else args.eos,
    )


def cmd_init(args):
    fields = ModelConfig().to_dict()
    config = ModelConfig(**{name: getattr(args, name) for name in fields})
    weights = init_random(config)
    save_weights(weights, args.out)
    print(json.dumps({"weights": args.out, "hash": weights.digest(), "config": config.to_dict()}))
    return EXIT_OK


def _run_generate(args, argv):
    start = time.perf_counter()
    _, weights = load_weights(args.weights)
    prompt = PromptSpec(tokens=tuple(args.prompt_tokens), video_span=args.video_span)
    config = _generation_config(args)
    session = DecodingSession(weights, prompt, config)
    tokens, trace = session.run()
    manifest = {
        "command": "generate",
        "argv": list(argv),
        "config": config.to_dict(),
        "weights_path": os.path.abspath(args.weights),
        "weights_hash": weights.digest(),
        "tool_version": __version__,
        "duration_s": time.perf_counter() - start,
        "seeds": {"sampler_seed": config.sampler_seed, "model_seed": weights.config.seed},
    }
    return session, tokens, trace, manifest


def cmd_generate(args, argv):
    session, tokens, trace, manifest = _run_generate(args, argv)
    if args.trace_out:
        export(trace, args.trace_out, args.trace_format)
        _write_json(args.trace_out + ".manifest.json", manifest)
    if args.output_dir:
        os.makedirs(args.output_dir, exist_ok=True)
        export(trace, os.path.join(args.output_dir, f"trace.{args.trace_format}"), args.trace_format)
        _write_json(os.path.join(args.output_dir, "manifest.json"), manifest)
    if args.controller_dump and session.controller is not None:
        session.controller.dump(args.controller_dump)
    print(json.dumps({"tokens": tokens, "summary": summarize(trace).to_dict()}))
    return EXIT_OK


def cmd_replay(args):
    with open(args.manifest, encoding="utf-8") as fh:
        manifest = json.load(fh)
    _, weights = load_weights(manifest["weights_path"])
    if weights.digest() != manifest["weights_hash"]:
        raise WeightsFormatError("weights file no longer matches the manifest hash", field="weights_hash")
    argv = list(manifest["argv"])
    for flag in ("--trace-out", "--output-dir", "--controller-dump", "--weights"):
        while flag in argv:
            i = argv.index(flag)
            del argv[i : i + 2]
    argv += ["--weights", manifest["weights_path"], "--trace-out", args.trace_out]
    return main(argv)


def cmd_analyze(args):
    trace = read_trace(args.trace)
    if not trace.records:
        summary, seg = None, None
    else:
        summary = summarize(trace)
        seg = segment_phases(trace, args.persistence)
    if args.format == "jsonl":
        lines = [
            json.dumps({"kind": "summary", **(summary.to_dict() if summary else {})}),
            json.dumps({"kind": "segmentation", **(seg.to_dict() if seg else {})}),
        ]
        text = "\n".join(lines) + "\n"
    else:
        text = dumps(summary, "csv") if summary else "# {}\n"
    _emit(text, args, f"analysis.{args.format}")
    return EXIT_OK


def cmd_compare(args):
    result = compare(read_trace(args.trace_a), read_trace(args.trace_b))
    _emit(json.dumps(result) + "\n", args, "compare.json")
    return EXIT_OK


def _instance(args):
    if args.weights:
        if args.prompt_tokens is None or args.video_span is None:
            raise ConfigError("--prompt-tokens and --video-span are required with --weights")
        _, weights = load_weights(args.weights)
        return weights, PromptSpec(tokens=tuple(args.prompt_tokens), video_span=args.video_span)
    return toy_instance(args.seed)


def cmd_gradcheck(args):
    weights, prompt = _instance(args)
    report = gradcheck(weights, prompt, eps=args.eps, delta_scale=args.delta_scale, tolerance=args.tolerance)
    _emit(json.dumps(report.to_dict()) + "\n", args, "gradcheck.json")
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def cmd_props(args):
    kinds = PROPOSITION_KINDS if args.kind == "all" else (args.kind,)
    results = {}
    for kind in kinds:
        passed, measurements = proposition_harness(kind, seeds=args.seeds, beta=args.beta)
        results[kind] = {"passed": bool(passed), "measurements": measurements}
    _emit(json.dumps(results, default=float) + "\n", args, "props.json")
    return EXIT_OK if all(r["passed"] for r in results.values()) else EXIT_CHECK_FAILED


def cmd_sweep(args):
    config = _generation_config(args)
    values = args.values
    if values is None:
        values = lr_grid() if args.axis == "lr" else [2, 4, 8]
    if args.axis == "k":
        values = [int(v) for v in values]
    est = EntropySteeredGenerator(
        mode=config.mode,
        step_size=config.step_size,
        learning_rate=config.learning_rate,
        clip_norm=config.clip_norm,
        beta=config.beta,
        temperature=config.temperature,
        top_p=config.top_p,
        min_p=config.min_p,
        keep_ratio=config.keep_ratio,
        max_length=config.max_length,
        seed=config.sampler_seed,
        eos_id=config.eos_id,
    )
    weights = prompt = None
    if args.weights:
        weights, prompt = _instance(args)
    rows = sweep(est, args.axis, values, range(args.seeds), weights, prompt, threads=args.threads)
    args.manifest_extra = {
        "sweep_values": list(values),
        "lr_spacing": "linear" if args.axis == "lr" and args.values is None else None,
        "config": config.to_dict(),
    }
    lines = [",".join(SWEEP_COLUMNS)]
    for row in rows:
        lines.append(",".join("" if row[c] is None else repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in SWEEP_COLUMNS))
    _emit("\n".join(lines) + "\n", args, "sweep.csv")
    return EXIT_OK


def _manifest(args, argv, start):
    resolved = {k: v for k, v in vars(args).items() if k != "manifest_extra"}
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "config": resolved,
        "tool_version": __version__,
        "duration_s": time.perf_counter() - start,
        "seeds": {"seed": getattr(args, "seed", None), "n_seeds": getattr(args, "seeds", None)},
    }
    manifest.update(getattr(args, "manifest_extra", {}))
    return manifest


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    handlers = {
        "init": cmd_init,
        "generate": lambda a: cmd_generate(a, argv),
        "replay": cmd_replay,
        "analyze": cmd_analyze,
        "compare": cmd_compare,
        "gradcheck": cmd_gradcheck,
        "props": cmd_props,
        "sweep": cmd_sweep,
    }
    start = time.perf_counter()
    try:
        code = handlers[args.command](args)
        if args.output_dir and args.command not in ("generate", "replay"):
            os.makedirs(args.output_dir, exist_ok=True)
            _write_json(os.path.join(args.output_dir, "manifest.json"), _manifest(args, argv, start))
        return code
    except NumericalError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except WeightsFormatError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ConfigError, CacheFullError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
