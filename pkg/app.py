"""
hitcert - Hit Certification for Generated Candidates
Command-line entry point
"""

import logging
import os
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import yaml

from hitcert.cli.commands import COMMANDS, build_parser, dispatch
from hitcert.cli.formats import emit_report
from hitcert.core.errors import InputError

logger = logging.getLogger("hitcert")

DEFAULT_CONFIG = Path(__file__).resolve().parent / "config.yaml"
DEFAULT_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INPUT_ERROR = 2
EXIT_NOT_CONFIDENT = 3


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def load_config(path: Optional[str] = None) -> Dict:
    """Load configuration from config.yaml (or the file given by --config)"""
    path = Path(path) if path else DEFAULT_CONFIG
    try:
        with open(path, "r", encoding="utf-8") as f:
            config = yaml.safe_load(f) or {}
    except OSError as e:
        raise InputError(f"{path}: cannot read config ({e})")
    except yaml.YAMLError as e:
        raise InputError(f"{path}: invalid YAML ({e})")
    if not isinstance(config, dict):
        raise InputError(f"{path}: config must be a mapping")
    return config


def validate_config(config: Dict):
    """Warn at startup about suspicious configuration values."""
    defaults = config.get("defaults")
    if not defaults:
        logger.warning("config has no 'defaults' section; built-in defaults will be used")
        defaults = {}

    alpha = defaults.get("alpha", 0.1)
    if not isinstance(alpha, (int, float)) or not 0 < alpha < 1:
        logger.warning(f"defaults.alpha={alpha!r} is outside (0, 1); every command will reject it")
    permutations = defaults.get("permutations", 2000)
    if isinstance(permutations, int) and permutations < 100:
        logger.warning(f"defaults.permutations={permutations} is small; p-values will be coarse")
    quantile = defaults.get("ood_quantile")
    if quantile is not None and not 0 <= quantile < 1:
        logger.warning(f"defaults.ood_quantile={quantile!r} is outside [0, 1)")

    if "simulation" not in config:
        logger.info("config has no 'simulation' section; simulate needs --config with presets")
    grid = (config.get("diagnostics") or {}).get("gamma_grid")
    if grid is not None and 1 not in grid and 1.0 not in grid:
        logger.warning("diagnostics.gamma_grid lacks 1; sensitivity sweeps will fail")


def setup_logging(config: Dict, level: Optional[str] = None):
    """Root logger with a stderr handler and an optional file handler"""
    log_cfg = config.get("logging", {}) or {}
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    log_file = log_cfg.get("file")
    if log_file:
        os.makedirs(os.path.dirname(os.path.abspath(log_file)), exist_ok=True)
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(
        level=getattr(logging, str(level or log_cfg.get("level", "INFO")).upper(), logging.INFO),
        format=log_cfg.get("format", DEFAULT_FORMAT),
        handlers=handlers,
        force=True,
    )


def _global_options(argv: List[str]) -> Dict[str, Optional[str]]:
    """--config and --log-level given before the subcommand"""
    head = []
    for token in argv:
        if token in COMMANDS:
            break
        head.append(token)
    found = {"config": None, "log_level": None}
    for i, token in enumerate(head):
        for name, flag in (("config", "--config"), ("log_level", "--log-level")):
            if token == flag and i + 1 < len(head):
                found[name] = head[i + 1]
            elif token.startswith(flag + "="):
                found[name] = token.split("=", 1)[1]
    return found


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    options = _global_options(argv)

    try:
        config = load_config(options["config"])
    except InputError as e:
        setup_logging({}, options["log_level"])
        logger.error(str(e))
        return EXIT_INPUT_ERROR

    setup_logging(config, options["log_level"])
    validate_config(config)
    args = build_parser(config).parse_args(argv)

    started = time.perf_counter()
    try:
        result = dispatch(args, config)
        if getattr(args, "record_timings", False):
            result.report["timings"] = {"total_seconds": time.perf_counter() - started}
        emit_report(result.report, getattr(args, "output", None))
    except InputError as e:
        logger.error(f"{args.command}: {e}")
        return EXIT_INPUT_ERROR
    except Exception as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        return EXIT_FAILURE

    if result.exit_code:
        return result.exit_code
    if result.not_confident and getattr(args, "strict", False):
        logger.info("not confident enough (--strict)")
        return EXIT_NOT_CONFIDENT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
