"""Command-line entry point.

    mmsmpc --config cfg.json --out runs/a              # one closed-loop run
    mmsmpc --config cfg.json --out runs/grid --grid    # ablation table
    mmsmpc --validate [--checks kf,stack]              # oracle suite

Exit codes: 0 completed (whatever the task outcome), 1 a validation check
failed, 2 bad configuration or check selection, 3 output directory not writable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional

from .models import ContractError
from .sim import ScenarioConfig, batch_grid, dump_json, run_closed_loop, summary, write_table
from .smpc import VARIANTS

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("mmsmpc")


@dataclass(frozen=True)
class RunManifest:
    kind: str  # single | grid | validate
    config_path: Optional[Path]
    out_dir: Optional[Path]
    seed: Optional[int] = None
    variants: Optional[List[str]] = None
    sigma: Optional[int] = None
    checks: Optional[List[str]] = None
    workers: Optional[int] = None


class ConfigError(Exception):
    pass


def load_config(path: Optional[Path]) -> ScenarioConfig:
    """Parse a JSON config; a missing path means all defaults (the reference stop-sign scenario)."""
    if path is None:
        return ScenarioConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    try:
        return ScenarioConfig.from_dict(data)
    except (ContractError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


def _prepare_out(out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"{out_dir} is not writable")


def _overrides(cfg: ScenarioConfig, m: RunManifest) -> ScenarioConfig:
    kw = {}
    if m.seed is not None:
        kw["seed"] = m.seed
    if m.sigma is not None:
        kw["sigma"] = m.sigma
    if m.kind == "single" and m.variants:
        kw["variant"] = m.variants[0]
    return replace(cfg, **kw) if kw else cfg


def run_single(m: RunManifest) -> int:
    try:
        cfg = _overrides(load_config(m.config_path), m)
    except (ConfigError, ContractError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    try:
        _prepare_out(m.out_dir)
    except OSError as exc:
        log.error("output directory: %s", exc)
        return EXIT_IO
    lg = run_closed_loop(cfg)
    try:
        lg.write_csv(m.out_dir / "log.csv")
        dump_json(dict(config=cfg.to_dict(), **lg.to_json()), m.out_dir / "log.json")
        dump_json(summary(lg, cfg), m.out_dir / "summary.json")
    except OSError as exc:
        log.error("writing outputs: %s", exc)
        return EXIT_IO
    s = summary(lg, cfg)
    print(f"sigma={cfg.sigma} variant={cfg.variant} success={s['success']} F%={s['F_pct']:.2f}")
    return EXIT_OK


def run_grid(m: RunManifest) -> int:
    try:
        base = _overrides(load_config(m.config_path), m)
    except (ConfigError, ContractError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    try:
        _prepare_out(m.out_dir)
    except OSError as exc:
        log.error("output directory: %s", exc)
        return EXIT_IO
    variants = m.variants or list(VARIANTS)
    sigmas = (m.sigma,) if m.sigma is not None else (1, 2)
    table = batch_grid(base, variants=variants, sigmas=sigmas, workers=m.workers)
    try:
        write_table(table, m.out_dir / "table.csv")
    except OSError as exc:
        log.error("writing table: %s", exc)
        return EXIT_IO
    for row in table:
        print(f"{row['variant']:>9} sigma={row['sigma']} S%={row['S_pct']:6.2f} F%={row['F_pct']:6.2f}")
    return EXIT_OK


def validate(m: RunManifest) -> int:
    from .validation import SUITE, run_suite

    names = m.checks if m.checks is not None else list(SUITE)
    if not names:
        log.error("empty check selection")
        return EXIT_CONFIG
    unknown = [n for n in names if n not in SUITE]
    if unknown:
        log.error("unknown checks %s; available: %s", unknown, ", ".join(SUITE))
        return EXIT_CONFIG
    results = run_suite(names)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


def _csv_list(text: str) -> List[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mmsmpc", description=__doc__.split("\n")[0])
    ap.add_argument("--config", type=Path, help="JSON scenario config (defaults give the reference stop-sign scenario)")
    ap.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--variant", type=_csv_list,
                    help=f"SMPC variant ({', '.join(VARIANTS)}); comma-separated list with --grid")
    ap.add_argument("--sigma", type=int, choices=(1, 2), help="true TV mode")
    mode = ap.add_mutually_exclusive_group()
    mode.add_argument("--grid", action="store_true", help="run the 16-point ablation grid")
    mode.add_argument("--validate", action="store_true", help="run the oracle suite")
    ap.add_argument("--checks", type=_csv_list, help="comma-separated oracle checks for --validate")
    ap.add_argument("--workers", type=int, help="worker processes for --grid")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.variant:
        bad = [v for v in args.variant if v not in VARIANTS]
        if bad:
            log.error("unknown variant(s) %s", bad)
            return EXIT_CONFIG
    if args.config is not None and not args.config.is_file():
        log.error("config file %s not found", args.config)
        return EXIT_CONFIG
    kind = "validate" if args.validate else "grid" if args.grid else "single"
    m = RunManifest(kind, args.config, args.out, args.seed, args.variant, args.sigma, args.checks, args.workers)
    return {"single": run_single, "grid": run_grid, "validate": validate}[kind](m)


if __name__ == "__main__":
    sys.exit(main())
