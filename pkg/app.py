# app.py
import argparse
import json
import logging
import sys

from pydantic import ValidationError

import config
from errors import ConfigError
from experiments import EXPERIMENTS, emit_figure_data, run_points
from models import RunConfig
from run_manager import RunManager, config_hash

logging.basicConfig(level=config.LOG_LEVEL, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


# --- Config loading ---

def _line_of(text: str, loc: tuple) -> int | None:
    """Best-effort source line for a pydantic error location, found by walking its keys."""
    pos, found = 0, None
    for key in loc:
        if not isinstance(key, str):
            continue
        hit = text.find(f'"{key}"', pos)
        if hit < 0:
            break
        pos, found = hit, hit
    return None if found is None else text.count("\n", 0, found) + 1


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e.msg}", line=e.lineno) from e
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object", line=1)
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"]) or "<root>"
        message = f"{where}: {first['msg']}"
        if e.error_count() > 1:
            message += f" (and {e.error_count() - 1} more)"
        raise ConfigError(message, line=_line_of(text, first["loc"])) from e


def load_config(path: str, overrides: dict | None = None) -> RunConfig:
    try:
        with open(path, 'r') as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read '{path}': {e}") from e
    return parse_config(text, overrides)


# --- Commands ---

def run(cfg: RunConfig) -> int:
    manager = RunManager(cfg.output_dir)
    manifest = manager.start(cfg)
    results = run_points(cfg)
    for panel, frame in emit_figure_data(cfg, results).items():
        manager.write_table(cfg, panel, frame)
    manifest = manager.finish(cfg, manifest, [r.status for r in results])
    print(manager.get_run_dir(cfg))
    return EXIT_OK if manifest.ok else EXIT_RUNTIME


def list_experiments(template: bool = False) -> str:
    if template:
        return json.dumps(config.DEFAULT_RUN_CONFIG, indent=4)
    lines = []
    for name, experiment in EXPERIMENTS.items():
        lines.append(f"{name}: {experiment.description}")
        for panel, columns in experiment.panels.items():
            lines.append(f"    {panel}: {columns}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pairsqueeze",
                                     description="Pair production, two-mode squeezing and Ramsey sensitivity runs.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "validate"):
        p = sub.add_parser(name)
        p.add_argument("config", help="JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--output-dir", dest="output_dir")
    p = sub.add_parser("list-experiments")
    p.add_argument("--template", action="store_true", help="print a starter configuration instead")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list-experiments":
        print(list_experiments(args.template))
        return EXIT_OK
    overrides = {"seed": args.seed, "workers": args.workers, "output_dir": args.output_dir}
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "validate":
            print(f"OK {cfg.experiment} {config_hash(cfg)}")
            return EXIT_OK
        return run(cfg)
    except ConfigError as e:
        logger.error(f"Invalid config '{args.config}': {e}")
        print(f"{args.config}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        logger.exception(f"Run failed for '{args.config}':")
        print(f"{args.config}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
