"""Command-line entry point (``filtnas`` or ``python -m filtnas``).

Exit codes: 0 success, 1 a check or run failed, 2 usage error or unreadable
input file.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ._seeds import child_rng
from .arch import NetworkConfig, validate_config
from .complexity import complexity_report, network_complexity
from .dist import layer_probs, sample_network
from .errors import ConfigError, DomainError, SpaceTooLarge
from .harness import (
    emit_results,
    format_check_table,
    lemma_suite,
    load_alpha,
    load_architecture,
    load_config,
    load_experiment,
    run_grid_study,
    run_search,
    save_alpha,
)


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    # Subcommand copies must not overwrite values given before the subcommand.
    hide = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=hide or 0, help="master seed")
    parser.add_argument("--out", type=Path, default=hide, help="output directory")
    parser.add_argument("--threads", type=int, default=hide or 1, help="worker threads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="filtnas", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run a search from an experiment file")
    p.add_argument("spec", type=Path)
    _global_flags(p, suppress=True)

    p = sub.add_parser("grid", help="grid variance study from an experiment file")
    p.add_argument("spec", type=Path)
    p.add_argument("--repeats", type=int, default=None, help="override the file's repeat count")
    _global_flags(p, suppress=True)

    p = sub.add_parser("bops", help="complexity report of one configuration")
    p.add_argument("arch", type=Path)
    p.add_argument("config", help="config file or config id such as 4-0_0-4")
    p.add_argument("--target", help="config file or id to report a ratio against")
    p.add_argument("--no-memory", action="store_true", help="exclude memory-fetch bits")
    _global_flags(p, suppress=True)

    p = sub.add_parser("oracle-check", help="verify analytic gradients against finite differences")
    p.add_argument("--instances", type=int, default=100)
    _global_flags(p, suppress=True)

    p = sub.add_parser("sample", help="draw configurations from an alpha file")
    p.add_argument("arch", type=Path)
    p.add_argument("alpha", type=Path)
    p.add_argument("-n", "--count", type=int, default=5)
    _global_flags(p, suppress=True)
    return parser


def _config_arg(text: str, arch) -> NetworkConfig:
    path = Path(text)
    if path.suffix == ".json" or path.exists():
        return load_config(path, arch)
    try:
        return validate_config(arch, NetworkConfig.from_id(text))
    except ValueError as exc:
        raise ConfigError(f"{text!r} is neither a config file nor a valid config id: {exc}") from None


def _cmd_search(args) -> int:
    spec = load_experiment(args.spec)
    out = args.out or spec.output or Path("runs") / args.spec.stem
    alpha, trace = run_search(spec, seed=args.seed, workers=args.threads)
    emit_results(trace, out)
    save_alpha(alpha, out / "alpha.json")
    probs = [layer_probs(alpha, l).round(4).tolist() for l in range(len(spec.architecture))]
    print(f"{spec.algorithm}: {len(trace)} iterations; final probabilities {probs}")
    print(f"wrote {out / 'trace.jsonl'} and {out / 'alpha.json'}")
    return 0


def _cmd_grid(args) -> int:
    spec = load_experiment(args.spec)
    out = args.out or spec.output or Path("runs") / args.spec.stem
    repeats = args.repeats if args.repeats is not None else max(spec.repeats, 1)
    results = run_grid_study(spec, repeats=repeats, seed=args.seed, workers=args.threads)
    failed = sum(len(r.failures) for r in results)
    paths = emit_results(results, out)
    print(f"{len(results)} configurations x {repeats} repeats ({failed} failed runs)")
    for path in paths:
        print(f"wrote {path}")
    return 0


def _cmd_bops(args) -> int:
    arch = load_architecture(args.arch)
    cfg = _config_arg(args.config, arch)
    opts = {"include_memory": False} if args.no_memory else {}
    if args.target:
        report = complexity_report(cfg, arch, _config_arg(args.target, arch), **opts)
    else:
        report = network_complexity(cfg, arch, **opts)
    out = {"config": cfg.config_id, **report.to_dict()}
    # no target means no ratio; emit null rather than the non-JSON NaN
    out = {k: None if isinstance(v, float) and v != v else v for k, v in out.items()}
    text = json.dumps(out, indent=2, allow_nan=False)
    print(text)
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "bops.json").write_text(text + "\n")
    return 0


def _cmd_oracle_check(args) -> int:
    rows = lemma_suite(seed=args.seed, instances=args.instances)
    print(format_check_table(rows))
    return 0 if all(r.passed for r in rows) else 1


def _cmd_sample(args) -> int:
    arch = load_architecture(args.arch)
    alpha = load_alpha(args.alpha, arch)
    rng = child_rng(args.seed, "cli-sample")
    for _ in range(args.count):
        print(sample_network(alpha, arch, rng).config_id)
    return 0


COMMANDS = {
    "search": _cmd_search,
    "grid": _cmd_grid,
    "bops": _cmd_bops,
    "oracle-check": _cmd_oracle_check,
    "sample": _cmd_sample,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads < 1:
        parser.print_usage(sys.stderr)
        print("filtnas: error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args)
    except (FileNotFoundError, ConfigError) as exc:
        print(f"filtnas: error: {exc}", file=sys.stderr)
        return 2
    except (DomainError, SpaceTooLarge, OSError) as exc:
        print(f"filtnas: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
