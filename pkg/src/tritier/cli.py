"""``tritier`` command-line front end."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from collections import Counter
from typing import List, Optional

import numpy as np

from .catalog import (
    CorruptCatalogError, EmptyBuildError, EmptyCatalogError, build_catalog, load_catalog, query_nearest,
    sample_scenarios, save_catalog, scaled_distances, wellbehaved_prob,
)
from .config import ConfigError, RunConfig, load_config
from .orchestrator import compare_baselines, run_closed_loop

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_EMPTY_BUILD = 3
EXIT_INFRA = 4
EXIT_CORRUPT = 5
EXIT_EMPTY_CATALOG = 6

CATALOG_FILE = "catalog.jsonl"

log = logging.getLogger("tritier")


def _setup_logging() -> None:
    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("TRITIER_LOG", "error").lower(), logging.ERROR)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def _output_path(cfg: RunConfig, name: str) -> str:
    os.makedirs(cfg.output_dir, exist_ok=True)
    return os.path.join(cfg.output_dir, name)


def _write(path: str, text: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(text)


def cmd_offline_build(config_path: str) -> int:
    cfg = load_config(config_path)
    c = cfg.catalog
    if c.n_scenarios < 1:
        raise EmptyBuildError("catalog.n_scenarios is 0")
    rng = np.random.default_rng(cfg.seed)
    base = cfg.scenario.forecast()
    scenarios = sample_scenarios(c.n_scenarios, rng, cfg.scenario.feature_ranges, base)
    start = time.perf_counter()
    catalog = build_catalog(cfg.plant, scenarios, c.starts_per_scenario, c.settings(), cfg.seed, c.workers)
    wall = time.perf_counter() - start
    path = _output_path(cfg, CATALOG_FILE)
    save_catalog(catalog, path)
    labels = Counter(e.label.value for e in catalog.entries)
    print(json.dumps({"catalog": path, "entries": len(catalog), "labels": dict(sorted(labels.items())),
                      "build_wall_time_s": round(wall, 3)}))
    return EXIT_OK


def cmd_run(config_path: str, catalog_path: str) -> int:
    cfg = load_config(config_path)
    catalog = load_catalog(catalog_path)
    runlog = run_closed_loop(cfg.loop_config(), cfg.plant, cfg.scenario.truth(), catalog, cfg.seed,
                             forecast=cfg.scenario.forecast())
    stem = f"run_seed{cfg.seed}"
    _write(_output_path(cfg, stem + ".log"), runlog.dumps())
    _write(_output_path(cfg, stem + "_decisions.csv"), runlog.decisions_csv())
    _write(_output_path(cfg, stem + "_plans.csv"), runlog.plans_csv())
    print(json.dumps({"true_cost": runlog.true_cost, "modes": runlog.mode_counts(), "failed": runlog.failed}))
    return EXIT_OK


def cmd_compare(config_path: str, catalog_path: str, seeds: List[int]) -> int:
    cfg = load_config(config_path)
    if not seeds:
        raise ConfigError("seeds", "at least one seed is required")
    catalog = load_catalog(catalog_path)
    report = compare_baselines(cfg.loop_config(), cfg.plant, cfg.scenario.truth(), catalog, seeds,
                               cfg.scenario.forecast())
    path = _output_path(cfg, "comparison.json")
    _write(path, json.dumps(report, indent=2) + "\n")
    print(json.dumps({k: v["mean_true_cost"] for k, v in report["summary"].items()}))
    return EXIT_OK


def cmd_inspect(catalog_path: str, features: List[float], k: int) -> int:
    catalog = load_catalog(catalog_path)
    if len(catalog) == 0:
        raise EmptyCatalogError("catalog has no entries")
    near = query_nearest(catalog, features, k)
    dist = dict(zip((e.id for e in catalog.entries), scaled_distances(catalog, features)))
    verdict = wellbehaved_prob(catalog, features, k)
    print(json.dumps({
        "neighbors": [{"id": e.id, "distance": float(dist[e.id]), "label": e.label.value,
                       "objective": e.objective if np.isfinite(e.objective) else None,
                       "features": e.scenario_features.tolist(), "control": e.control_params.tolist()}
                      for e in near],
        "success_prob": verdict.success_prob,
        "mean_sensitivity": verdict.mean_sensitivity if np.isfinite(verdict.mean_sensitivity) else None,
    }))
    return EXIT_OK


def _int_list(text: str) -> List[int]:
    return [int(s) for s in text.split(",") if s.strip()]


def _float_list(text: str) -> List[float]:
    return [float(s) for s in text.split(",") if s.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tritier", description="Three-tier control on a shallow-water channel.")
    sub = p.add_subparsers(dest="command", required=True)
    b = sub.add_parser("offline-build", help="build and save the scenario catalog")
    b.add_argument("config")
    r = sub.add_parser("run", help="one closed-loop run")
    r.add_argument("config")
    r.add_argument("--catalog", required=True)
    c = sub.add_parser("compare", help="full loop against the three ablations")
    c.add_argument("config")
    c.add_argument("--catalog", required=True)
    c.add_argument("--seeds", required=True, type=_int_list)
    i = sub.add_parser("inspect", help="k nearest catalog entries for a feature vector")
    i.add_argument("catalog")
    i.add_argument("--features", required=True, type=_float_list)
    i.add_argument("-k", type=int, default=1)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        if args.command == "offline-build":
            return cmd_offline_build(args.config)
        if args.command == "run":
            return cmd_run(args.config, args.catalog)
        if args.command == "compare":
            return cmd_compare(args.config, args.catalog, args.seeds)
        if len(args.features) != 5:
            raise ConfigError("--features", "need exactly 5 comma-separated values")
        if args.k < 1:
            raise ConfigError("-k", "must be >= 1")
        return cmd_inspect(args.catalog, args.features, args.k)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EmptyBuildError as exc:
        print(f"EMPTY_BUILD: {exc}", file=sys.stderr)
        return EXIT_EMPTY_BUILD
    except CorruptCatalogError as exc:
        print(f"CORRUPT_CATALOG: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except EmptyCatalogError as exc:
        print(f"EMPTY_CATALOG: {exc}", file=sys.stderr)
        return EXIT_EMPTY_CATALOG
    except (OSError, MemoryError) as exc:
        log.error("infrastructure failure: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFRA


def entry_point() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry_point()
