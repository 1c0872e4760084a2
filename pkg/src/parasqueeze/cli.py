"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 optimizer stalled.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import (CalibrationError, ConfigError, DegeneratePhaseError,
                     OrthonormalityError, UndefinedPhaseError)
from .experiment import (ExperimentConfig, _jsonable, calibrate, full_pipeline,
                         run_amplification, run_resonance_scan, run_t0_linesearch,
                         run_trapping_sweep)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_STALLED = 0, 2, 3, 4

NUMERICAL_ERRORS = (CalibrationError, OrthonormalityError, UndefinedPhaseError,
                    DegeneratePhaseError, FloatingPointError, ArithmeticError)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="parasqueeze",
                                description="Parametric squeezing and trapping pipeline.")
    p.add_argument("verb", choices=["calibrate", "amplify", "trap", "linesearch",
                                    "resonance", "full-pipeline", "show-config"])
    p.add_argument("--config", type=Path, help="YAML configuration file")
    p.add_argument("--output", type=Path, help="output directory (overrides config)")
    p.add_argument("--seed", type=int, help="random seed (overrides config)")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a configuration key; repeatable")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    extra = list(args.overrides)
    if args.output is not None:
        extra.append(f"output={args.output}")
    if args.seed is not None:
        extra.append(f"seed={args.seed}")
    return cfg.with_overrides(extra) if extra else cfg


def _run(verb: str, cfg: ExperimentConfig) -> int:
    out = Path(cfg.output)
    stalled = False
    if verb == "show-config":
        sys.stdout.write(cfg.to_yaml())
        return EXIT_OK
    if verb == "calibrate":
        _, _, summary = calibrate(cfg)
        out.mkdir(parents=True, exist_ok=True)
        text = json.dumps(_jsonable(summary), indent=2)
        (out / "calibration.json").write_text(text + "\n")
        print(text)
    elif verb == "amplify":
        art = run_amplification(cfg)
        art.write(out / "amplification")
        print(json.dumps(_jsonable(art.summary), indent=2))
    elif verb == "trap":
        amp = run_amplification(cfg)
        for art in run_trapping_sweep(cfg, amp.states["t0"]):
            art.write(out / art.name)
            stalled |= art.stalled
            print(json.dumps(_jsonable({k: v for k, v in art.summary.items()
                                        if k != "calibration"}), indent=2))
    elif verb == "linesearch":
        art = run_t0_linesearch(cfg)
        art.write(out / "linesearch")
        for row in art.tables["t0_scan"]:
            print(f"t0={row['t0']:.4f} ms  xi_S={row['xi_s_terminal']:.6f}")
        print(f"best t0 = {art.summary['best_t0']:.4f} ms")
    elif verb == "resonance":
        art = run_resonance_scan(cfg)
        art.write(out / "resonance")
        for row in art.tables["resonance"]:
            print(f"omega/omega_J={row['ratio']:.4f}  rate={row['rate']:.6g} 1/ms")
        print(f"peak at {art.summary.get('peak_ratio', float('nan')):.4f} omega_J")
    elif verb == "full-pipeline":
        results = full_pipeline(cfg, out)
        stalled = any(a.stalled for a in results.values())
        print(f"wrote {len(results)} artifacts under {out}")
    return EXIT_STALLED if stalled else EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
    except (ConfigError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return _run(args.verb, cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
