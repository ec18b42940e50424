"""Command-line orchestration: simulate, thin, stats, cluster, tidal,
fkpp, report.

Configuration lives in one flat key=value file; command-line flags win
over file values.  Every output embeds the config hash and the seed, and
rerunning a command with identical configuration reproduces its files
byte for byte.  Exit codes: 0 success, 1 acceptance failure, 2 usage or
configuration error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import fkpp as fkpp_mod
from .branching import OffspringLaw, SimConfig, simulate_tree
from .errors import BBMLabError, ConfigError
from .genealogy import (normalized_overlap_matrix, q_thinning_matrix,
                        q_thinning_tree, representatives_above)
from .branching import leaf_configuration, read_tree_ndjson
from .ioutils import config_hash, float_str
from .martingale import read_records, write_records
from .pipeline import ExperimentConfig, ProbeConfig, run_experiment
from .point_process import (ClusterLibrary, PointSample, drift_off_probability,
                            expected_cluster_count, sample_cluster_process,
                            sample_exponential_ppp, sample_tidal_process)
from .stats import (TestReport, estimate_C, laplace_functional_compare,
                    lattice_control_runs, poissonianity_suite,
                    positive_control_runs, rank_gap_profile, render_reports,
                    runs_from_records, superposition_test, tail_bound_check)

ENV_OUT_DIR = "BBMLAB_OUT"

EXIT_OK = 0
EXIT_ACCEPTANCE = 1
EXIT_USAGE = 2
EXIT_IO = 3


def _parse_kv_file(path: str) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"bad config line (need key=value): {line!r}")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


class Settings:
    """Flat config: file values overridden by CLI flags."""

    def __init__(self, file_values: dict[str, str], args: argparse.Namespace):
        self.values = dict(file_values)
        for key, val in vars(args).items():
            if key in ("command", "config") or val is None:
                continue
            self.values[key] = str(val)

    def get(self, key: str, default=None) -> Optional[str]:
        return self.values.get(key, default)

    def get_float(self, key: str, default: Optional[float] = None) -> Optional[float]:
        raw = self.values.get(key)
        if raw is None or raw == "none":
            return default
        return float(raw)

    def get_int(self, key: str, default: Optional[int] = None) -> Optional[int]:
        raw = self.values.get(key)
        return default if raw is None else int(raw)

    def get_bool(self, key: str, default: bool = False) -> bool:
        raw = self.values.get(key)
        if raw is None:
            return default
        return raw.lower() in ("1", "true", "yes", "on")

    def get_floats(self, key: str, default: str = "") -> list[float]:
        raw = self.values.get(key, default)
        return [float(tok) for tok in raw.split(",") if tok.strip()]

    def offspring(self) -> OffspringLaw:
        raw = self.values.get("offspring", "2:1.0")
        probs: dict[int, float] = {}
        for tok in raw.split(","):
            k, p = tok.split(":")
            probs[int(k)] = float(p)
        return OffspringLaw.from_dict({str(k): v for k, v in probs.items()})

    def out_dir(self) -> Path:
        raw = (self.values.get("out_dir")
               or os.environ.get(ENV_OUT_DIR) or "bbmlab_out")
        path = Path(raw)
        path.mkdir(parents=True, exist_ok=True)
        return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _point_sample_files(sample: PointSample, base: Path) -> None:
    with open(base.with_suffix(".csv"), "w") as fh:
        fh.write("position\n")
        for p in sample.points:
            fh.write(float_str(float(p)) + "\n")
    meta = {
        "window_low": sample.window[0],
        "window_high": "inf" if math.isinf(sample.window[1]) else sample.window[1],
        "intensity_scale": sample.intensity_scale,
        "seed": sample.seed,
        "kind": sample.kind,
        "r": sample.r,
        "metadata": sample.metadata,
    }
    _write_json(base.with_suffix(".json"), meta)


# -- subcommands -------------------------------------------------------------


def cmd_simulate(settings: Settings) -> int:
    out = settings.out_dir()
    probe = ProbeConfig(
        thinned_q=settings.get_float("thinned_q", 0.5),
        thinned_top=settings.get_int("thinned_top", 40),
        probe_y=settings.get_float("probe_y", -3.0),
        stability_r=tuple(settings.get_floats("stability_r", "3,4")),
        pair_r=tuple(settings.get_floats("pair_r", "2,3,4")),
        top_keep=settings.get_int("top_keep", 64),
    )
    exp = ExperimentConfig(
        horizon=settings.get_float("horizon", 10.0),
        replicas=settings.get_int("replicas", 100),
        base_seed=settings.get_int("seed", 0),
        offspring=settings.offspring(),
        barrier_offset=settings.get_float("barrier"),
        checkpoint_times=tuple(settings.get_floats("checkpoints", "")),
        probe=probe,
        workers=settings.get_int("workers", 1),
    )
    records = run_experiment(exp)
    with open(out / "records.ndjson", "w") as fh:
        write_records(fh, exp.header(), records)
    if settings.get_bool("save_trees"):
        tree_dir = out / "trees"
        tree_dir.mkdir(exist_ok=True)
        for rep in range(exp.replicas):
            tree = simulate_tree(exp.sim_config(rep))
            with open(tree_dir / f"tree_{tree.seed}.ndjson", "w") as fh:
                tree.write_ndjson(fh)
    print(f"simulate: wrote {len(records)} records to {out / 'records.ndjson'}")
    return EXIT_OK


def cmd_thin(settings: Settings) -> int:
    out = settings.out_dir()
    tree_dir = Path(settings.get("trees", str(out / "trees")))
    if not tree_dir.is_dir():
        raise ConfigError(f"tree directory {tree_dir} does not exist")
    q_grid = settings.get_floats("q_grid", "0.1,0.3,0.5,0.7,0.9")
    check_oracle = settings.get_bool("check_matrix_oracle")
    stability_y = settings.get_float("stability_y", -3.0)
    files = sorted(tree_dir.glob("tree_*.ndjson"))
    if not files:
        raise ConfigError(f"no tree files in {tree_dir}")
    mismatches = 0
    stable = 0
    rows = []
    for path in files:
        with open(path) as fh:
            tree = read_tree_ndjson(fh)
        config = leaf_configuration(tree)
        per_tree_sets = []
        for q in q_grid:
            thin = q_thinning_tree(tree, q, config)
            if check_oracle:
                qmat = normalized_overlap_matrix(tree)
                ref = q_thinning_matrix(config, qmat, q)
                if not (np.array_equal(thin.selected_indices, ref.selected_indices)
                        and np.array_equal(thin.positions, ref.positions)):
                    mismatches += 1
            rows.append({"tree_seed": tree.seed, **thin.to_json()})
        sets = representatives_above(tree, q_grid, stability_y)
        stable += int(all(s == sets[0] for s in sets[1:]))
    with open(out / "thinned.ndjson", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    report = {
        "trees": len(files),
        "q_grid": q_grid,
        "matrix_oracle_checked": check_oracle,
        "matrix_oracle_mismatches": mismatches,
        "stability_y": stability_y,
        "stable_fraction": stable / len(files),
    }
    _write_json(out / "thin_report.json", report)
    print(f"thin: {len(files)} trees, stability fraction "
          f"{report['stable_fraction']:.3f}, mismatches {mismatches}")
    return EXIT_ACCEPTANCE if mismatches else EXIT_OK


def _parse_phi(raw: str) -> list[tuple[tuple[float, float], float]]:
    steps = []
    for tok in raw.split(","):
        if not tok.strip():
            continue
        lo, hi, a = tok.split(":")
        steps.append(((float(lo), float(hi)), float(a)))
    return steps


def cmd_stats(settings: Settings) -> int:
    out = settings.out_dir()
    records_path = Path(settings.get("records", str(out / "records.ndjson")))
    if not records_path.exists():
        raise ConfigError(f"records file {records_path} does not exist")
    with open(records_path) as fh:
        header, records = read_records(fh)
    cfg_hash = header.get("config_hash", "")
    seed = settings.get_int("seed", 0)
    k = settings.get_int("k", 5)
    level = settings.get_float("dispersion_level", -1.0)
    runs = runs_from_records(records)
    est = estimate_C(records, min_records=settings.get_int("min_records", 1000))
    reports: list[TestReport] = []
    floor = min((r.thinned_floor for r in records), default=-3.0)

    pos = positive_control_runs(runs, est.c_hat, seed + 1)
    for rep in poissonianity_suite(pos, est.c_hat, k=k, dispersion_level=level,
                                   config_hash=cfg_hash):
        rep.name = "control-positive/" + rep.name
        reports.append(rep)
    neg = lattice_control_runs(runs)
    for rep in poissonianity_suite(neg, est.c_hat, k=k, dispersion_level=level,
                                   config_hash=cfg_hash):
        rep.name = "control-negative/" + rep.name
        if rep.name.endswith(f"spacings-ks(k={k})"):
            rep.passed = bool(rep.p_value < 1e-6)
            rep.details["expected"] = "rejection at p < 1e-6"
        reports.append(rep)

    if not settings.get_bool("controls_only"):
        reports.extend(poissonianity_suite(runs, est.c_hat, k=k,
                                           dispersion_level=level,
                                           config_hash=cfg_hash))
        phi = _parse_phi(settings.get("phi", "0:1:1"))
        reports.append(laplace_functional_compare(
            runs, est.c_hat, phi, floor=floor, seed=seed, config_hash=cfg_hash))
        records_b = settings.get("records_b")
        records_single = settings.get("records_single")
        if records_b and records_single:
            with open(records_b) as fh:
                _, recs_b = read_records(fh)
            with open(records_single) as fh:
                _, recs_s = read_records(fh)
            if {r.horizon for r in recs_b} != {r.horizon for r in records}:
                raise ConfigError("superposition runs must share the horizon")
            reports.append(superposition_test(
                runs, runs_from_records(recs_b), runs_from_records(recs_s),
                est.c_hat, k=k, config_hash=cfg_hash))

    result = {
        "config_hash": cfg_hash,
        "c_hat": est.c_hat,
        "c_hat_stderr": est.stderr,
        "fit_window": list(est.fit_window),
        "method": est.method,
        "reports": [r.to_json() for r in reports],
    }
    _write_json(out / "stats_report.json", result)
    text = render_reports(reports)
    (out / "stats_report.txt").write_text(text + "\n")
    print(text)
    failed = [r for r in reports if not r.passed]
    return EXIT_ACCEPTANCE if failed else EXIT_OK


def _decorated_command(settings: Settings, kind: str) -> int:
    out = settings.out_dir()
    r_list = settings.get_floats("r_list", "4,8,12")
    lam = settings.get_float("lam", 1.0)
    view_low = settings.get_float("view_low", 0.0)
    n_samples = settings.get_int("samples", 3)
    replicas = settings.get_int("replicas", 1000)
    library_size = settings.get_int("library_size", 4000)
    seed = settings.get_int("seed", 0)
    workers = settings.get_int("workers", 1)
    table = []
    for r in r_list:
        library = None
        if r > 0:
            library = ClusterLibrary(r, floor=view_low, n=library_size,
                                     seed=seed ^ 0xACE5, workers=workers)
        counts = []
        for i in range(max(n_samples, replicas)):
            if kind == "cluster":
                sample = sample_cluster_process(
                    r, lam, settings.get_float("trunc_a"), view_low,
                    seed + i, library=library)
            else:
                sample = sample_tidal_process(
                    r, lam, view_low, seed + i,
                    depth=settings.get_float("depth"), library=library)
            counts.append(len(sample))
            if i < n_samples:
                _point_sample_files(sample, out / f"{kind}_r{r:g}_{i}")
        row = {"r": r, "mean_count": float(np.mean(counts)),
               "replicas": len(counts)}
        if kind == "tidal":
            est = drift_off_probability(r, view_low, lam, replicas,
                                        seed + 10_000, library=library)
            row.update({"drift_off": est.estimate, "ci_low": est.ci_low,
                        "ci_high": est.ci_high,
                        "analytic": est.analytic_given_library})
        else:
            row["mean_count_quadrature"] = expected_cluster_count(
                r, lam, view_low, settings.get_float("trunc_a"))
        table.append(row)
    name = f"{kind}_table"
    _write_json(out / f"{name}.json", table)
    with open(out / f"{name}.csv", "w") as fh:
        cols = sorted({c for row in table for c in row})
        fh.write(",".join(cols) + "\n")
        for row in table:
            fh.write(",".join(float_str(float(row[c])) if c in row else ""
                              for c in cols) + "\n")
    print(f"{kind}: table over r={r_list} written to {out / (name + '.csv')}")
    return EXIT_OK


def cmd_cluster(settings: Settings) -> int:
    return _decorated_command(settings, "cluster")


def cmd_tidal(settings: Settings) -> int:
    return _decorated_command(settings, "tidal")


def cmd_fkpp(settings: Settings) -> int:
    out = settings.out_dir()
    dx = settings.get_float("dx", 0.05)
    t_final = settings.get_float("t_final", 200.0)
    offspring = settings.offspring()
    track = fkpp_mod.run_front_tracking(
        dx=dx, t_final=t_final, offspring=offspring,
        record_from=settings.get_float("record_from", 4.0),
        record_every=settings.get_float("record_every", 2.0))
    fits = fkpp_mod.fit_front_speed(track.times, track.fronts,
                                    settings.get_float("fit_min", 20.0),
                                    settings.get_float("fit_max", t_final))
    residual = fkpp_mod.wave_residual(track.profile, offspring,
                                      converged_check=track.final_drift_per_step)
    anchor = settings.get_float("anchor", 0.0)
    tail = None
    if settings.get_bool("tail"):
        tail_track = fkpp_mod.run_front_tracking(
            dx=settings.get_float("tail_dx", 0.1),
            t_final=settings.get_float("tail_t_final", 800.0),
            offspring=offspring, record_from=100.0, record_every=20.0)
        est = fkpp_mod.tail_fit(tail_track.profile, anchor_x=anchor)
        tail = {"c_hat": est.c_hat, "stderr": est.stderr,
                "fit_window": list(est.fit_window), "method": est.method,
                "anchor": anchor}
    with open(out / "wave.csv", "w") as fh:
        fkpp_mod.export_profile_csv(track.profile, fh)
    with open(out / "front.csv", "w") as fh:
        fkpp_mod.export_front_csv(track, fh)
    report = {
        "dx": dx, "dt": track.dt, "t_final": t_final,
        "drift_per_step": track.final_drift_per_step,
        "fits": fits, "residual": residual, "tail": tail,
        "config_hash": config_hash(
            {k: v for k, v in settings.values.items()}),
    }
    _write_json(out / "fkpp_report.json", report)
    print(f"fkpp: speed {fits['speed']:.6f}, log coefficient "
          f"{fits['log_coefficient']:.4f}, residual {residual:.3e}")
    return EXIT_OK


def cmd_report(settings: Settings) -> int:
    out = settings.out_dir()
    lines = []
    failed = 0
    for path in sorted(out.glob("*.json")):
        try:
            payload = json.loads(path.read_text())
        except json.JSONDecodeError:
            continue
        lines.append(f"== {path.name} ==")
        if isinstance(payload, dict) and "reports" in payload:
            for rep in payload["reports"]:
                verdict = "PASS" if rep.get("passed") else "FAIL"
                failed += 0 if rep.get("passed") else 1
                lines.append(f"  [{verdict}] {rep.get('name')} "
                             f"p={rep.get('p_value')}")
        else:
            lines.append(f"  {json.dumps(payload, sort_keys=True)[:240]}")
    text = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(text)
    print(text)
    return EXIT_ACCEPTANCE if failed else EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "thin": cmd_thin,
    "stats": cmd_stats,
    "cluster": cmd_cluster,
    "tidal": cmd_tidal,
    "fkpp": cmd_fkpp,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bbmlab",
        description="Branching-diffusion extremes laboratory")
    parser.add_argument("--config", help="key=value configuration file")
    sub = parser.add_subparsers(dest="command", required=True)
    specs = {
        "simulate": ["out_dir", "seed", "workers", "horizon", "replicas",
                     "offspring", "barrier", "checkpoints", "save_trees",
                     "thinned_q", "thinned_top", "probe_y", "stability_r",
                     "pair_r", "top_keep"],
        "thin": ["out_dir", "trees", "q_grid", "check_matrix_oracle",
                 "stability_y"],
        "stats": ["out_dir", "seed", "records", "records_b", "records_single",
                  "k", "dispersion_level", "phi", "controls_only",
                  "min_records"],
        "cluster": ["out_dir", "seed", "workers", "r_list", "lam", "trunc_a",
                    "view_low", "samples", "replicas", "library_size"],
        "tidal": ["out_dir", "seed", "workers", "r_list", "lam", "depth",
                  "view_low", "samples", "replicas", "library_size"],
        "fkpp": ["out_dir", "dx", "t_final", "offspring", "record_from",
                 "record_every", "fit_min", "fit_max", "tail", "tail_dx",
                 "tail_t_final", "anchor"],
        "report": ["out_dir"],
    }
    for name, keys in specs.items():
        p = sub.add_parser(name)
        for key in keys:
            p.add_argument(f"--{key.replace('_', '-')}", dest=key)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        file_values = _parse_kv_file(args.config) if args.config else {}
        settings = Settings(file_values, args)
        return COMMANDS[args.command](settings)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except BBMLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
