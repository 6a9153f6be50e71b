"""Command-line entry point: ``foresight <command> --config <file|name> [overrides]``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .autodiff import NumericalError
from .config import ConfigError, apply_overrides, list_packaged_configs, load_config
from .ntk import NTKBudgetError, UnstableStepError
from .pipeline import COMMANDS, MANIFEST, run

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="foresight", description="Pruning-at-initialization experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", required=True,
                       help="YAML config, a manifest.json from an earlier run, or a packaged config name")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--trials", type=int)
        p.add_argument("--criterion", action="append", dest="criteria", help="repeatable")
        p.add_argument("--ratio", action="append", dest="ratios", type=float, help="repeatable")
        p.add_argument("--temperature", type=float, help="GraSP scoring temperature")
    sub.add_parser("configs", help="list the packaged reference configs")
    return parser


def _verify_against(manifest_path: Path, exp, command: str) -> tuple[int, list[str]]:
    """Compare this run's outputs with the hashes recorded in the source manifest."""
    recorded = json.loads(manifest_path.read_text()).get("commands", {}).get(command, {}).get("outputs", {})
    mismatched = [p for p, h in recorded.items() if exp.written.get(p) != h]
    return len(recorded), mismatched


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "configs":
        print("\n".join(list_packaged_configs()))
        return EXIT_OK
    try:
        cfg = load_config(args.config)
        cfg = apply_overrides(cfg, args.seed, args.out, args.trials, args.criteria, args.ratios, args.temperature)
        exp, result = run(args.command, cfg)
    except (ConfigError, NTKBudgetError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, UnstableStepError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(json.dumps({"command": args.command, "out": str(exp.out), "result": result,
                      "cache": exp.cache_stats}, sort_keys=True))
    source = Path(args.config)
    if source.name == MANIFEST and source.exists() and source.resolve() != (exp.out / MANIFEST).resolve():
        total, bad = _verify_against(source, exp, args.command)
        print(f"reproduced {total - len(bad)}/{total} recorded outputs" + (f"; differing: {bad}" if bad else ""))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
