"""Experiment driver: configuration-driven runs, CSV reports, summaries.

Exit codes: 0 success, 1 usage error, 2 infeasible instance or a size
overflow, 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .active import (
    ActiveConfig,
    ActiveReport,
    exhaustive_stage,
    run_active,
    run_random_baseline,
)
from .env import ConfigError
from .fixtures import FIXTURE_NAMES, Fixture, get_fixture, load_fixture_file
from .policy import EPS_POLICY
from .satsynth import EncoderError, SolverLimitError, hypothesis_from_machine
from .traces import (
    TreeOverflowError,
    cross_class_pair_count,
    pairs_to_npz,
    witnessed_pair_count,
)

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_INTERNAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_USAGE)


@dataclass
class RunSpec:
    mode: str
    fixture: str | None = None
    config: str | None = None
    depth: int | None = None
    burn_in: int = 6
    budget: int = 250
    n_active: int = 100
    max_depth: int = 20
    trials: int = 1
    seed: int = 0
    cap: int = 10_000
    eps_policy: float = EPS_POLICY
    no_stutter: bool = False
    pair_sample: int = 5_000
    pair_cap: int = 200_000
    dfs_budget: int = 200_000
    u_max: int | None = None
    n_ap: int | None = None
    out: str = "runs"
    dump_policy: bool = False

    def load_fixture(self) -> Fixture:
        if self.config:
            return load_fixture_file(self.config)
        if self.fixture:
            return get_fixture(self.fixture)
        raise ValueError("one of --fixture or --config is required")


def _write_trial_csv(path: Path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["depth", "raw_count", "class_count", "pairs_queried", "negatives_added"])
        for r in rows:
            w.writerow([r.depth, r.raw_count, r.class_count, r.pairs_queried, r.negatives_added])


def _write_timing_csv(path: Path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["depth", "seconds"])
        for r in rows:
            w.writerow([r.depth, f"{r.seconds:.6f}"])


def _aggregate(reports: list[ActiveReport], path: Path) -> None:
    """Mean/std of solution counts per depth, carrying converged trials flat."""
    if not reports:
        return
    top = max(r.rows[-1].depth for r in reports)
    lo = min(r.rows[0].depth for r in reports)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["depth", "mean_raw", "std_raw", "mean_classes", "std_classes", "trials"])
        for d in range(lo, top + 1):
            raws, classes = [], []
            for r in reports:
                rows = [x for x in r.rows if x.depth <= d]
                if rows:
                    raws.append(rows[-1].raw_count)
                    classes.append(rows[-1].class_count)
            if raws:
                w.writerow([
                    d,
                    f"{np.mean(raws):.4f}", f"{np.std(raws):.4f}",
                    f"{np.mean(classes):.4f}", f"{np.std(classes):.4f}",
                    len(raws),
                ])


def emit_memory_report(out_dir, tree=None, partition=None, pairs=None) -> dict:
    """Prefix/pair counts and serialized cache sizes for a finished run."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stats = {
        "stored_prefixes": 0,
        "pair_count_full": 0,
        "pair_count_witnessed": 0,
        "pairs_materialized": 0,
        "tree_bytes": 0,
        "pairs_bytes": 0,
    }
    if tree is not None:
        stats["stored_prefixes"] = tree.n_prefixes
        tree_path = out_dir / "tree_cache.npz"
        tree.to_npz(tree_path)
        stats["tree_bytes"] = os.path.getsize(tree_path)
    if partition is not None:
        stats["pair_count_full"] = cross_class_pair_count(partition)
        stats["pair_count_witnessed"] = witnessed_pair_count(partition)
    if pairs is not None:
        stats["pairs_materialized"] = len(pairs)
        pairs_path = out_dir / "pairs_cache.npz"
        pairs_to_npz(pairs, pairs_path)
        stats["pairs_bytes"] = os.path.getsize(pairs_path)
    with open(out_dir / "memory.txt", "w", encoding="utf-8") as fh:
        fh.write("memory report\n")
        fh.write(f"  stored prefixes:        {stats['stored_prefixes']}\n")
        fh.write(f"  negative pairs (full):  {stats['pair_count_full']}\n")
        fh.write(f"  negative pairs (witnessed): {stats['pair_count_witnessed']}\n")
        fh.write(f"  pairs materialized:     {stats['pairs_materialized']}\n")
        fh.write(f"  tree cache bytes:       {stats['tree_bytes']}\n")
        fh.write(f"  pairs cache bytes:      {stats['pairs_bytes']}\n")
    return stats


def _summary_lines(fixture: Fixture, reports: list[ActiveReport]) -> list[str]:
    truth = hypothesis_from_machine(fixture.machine)
    lines = [
        f"fixture: {fixture.name}",
        f"{'seed':>8} {'mode':>16} {'max_depth':>9} {'prefixes':>9} {'negatives':>9} "
        f"{'discovery_s':>11} {'sat_s':>9} {'total_s':>9} {'sols':>6} {'classes':>7} {'conv':>5} {'truth':>5}",
    ]
    for r in reports:
        final = r.rows[-1] if r.rows else None
        in_set = r.final_set.contains(truth) if r.final_set is not None else False
        lines.append(
            f"{r.seed:>8} {r.mode:>16} {r.final_depth():>9} {r.stored_prefixes:>9} "
            f"{r.negatives_total:>9} {r.discovery_seconds:>11.2f} {r.sat_seconds:>9.2f} "
            f"{r.total_seconds:>9.2f} {(final.raw_count if final else 0):>6} "
            f"{(final.class_count if final else 0):>7} {str(r.converged):>5} {str(bool(in_set)):>5}"
        )
    return lines


def _run_verify(spec: RunSpec, fixture: Fixture, out_dir: Path) -> int:
    from .traces import compute_signatures, enumerate_prefix_tree, materialize_negatives
    from .satsynth import EncodingParams, encode, enumerate_all
    from .verify import brute_force_feasible

    depth = spec.depth or min(4, fixture.mdp.n_states)
    u_max = spec.u_max or fixture.u_max
    n_ap = spec.n_ap or fixture.n_ap
    non_stut = fixture.stutter_invariant and not spec.no_stutter
    oracle = fixture.make_oracle()
    tree = enumerate_prefix_tree(fixture.mdp, depth, compress=non_stut)
    part = compute_signatures(tree, oracle, spec.eps_policy)
    if witnessed_pair_count(part) <= spec.pair_cap:
        pairs = materialize_negatives(part, tree, mode="all")
    else:
        pairs = materialize_negatives(
            part, tree, mode="per_terminal", sample_per_group=spec.pair_sample,
            seed=fixture.burn_in_seed,
        )
    inst = encode(pairs, tree, EncodingParams(u_max, n_ap, non_stut), fixture.mdp.n_states)
    hset = enumerate_all(inst, spec.cap)
    sat_keys = {h.key for h in hset.hypotheses}
    bf = brute_force_feasible(pairs, tree, u_max, n_ap, fixture.mdp.n_states, non_stuttering=non_stut)
    bf_keys = {h.key for h in bf}
    if hset.truncated or sat_keys != bf_keys:
        print(f"oracle cross-check FAILED: sat={len(sat_keys)} brute={len(bf_keys)}")
        return EXIT_INTERNAL
    truth = hypothesis_from_machine(fixture.machine)
    if u_max == fixture.u_max and n_ap == fixture.n_ap and not hset.contains(truth):
        print("oracle cross-check FAILED: ground truth eliminated")
        return EXIT_INTERNAL
    print(f"oracle cross-check passed ({len(sat_keys)} hypotheses at depth {depth})")
    return EXIT_OK


def _run_exhaustive(spec: RunSpec, fixture: Fixture, out_dir: Path) -> int:
    import time

    if spec.depth is None:
        raise ValueError("--depth is required in exhaustive mode")
    oracle = fixture.make_oracle()
    non_stut = fixture.stutter_invariant and not spec.no_stutter
    t0 = time.perf_counter()
    tree, part, pairs, inst, hset, disc, sat = exhaustive_stage(
        fixture, spec.depth, oracle, spec.cap,
        pair_cap=spec.pair_cap, pair_sample=spec.pair_sample, eps=spec.eps_policy,
        non_stuttering=non_stut, u_max=spec.u_max, n_ap=spec.n_ap,
    )
    report = ActiveReport(mode="exhaustive", fixture=fixture.name, seed=spec.seed)
    from .active import DepthRow

    report.rows.append(
        DepthRow(spec.depth, len(hset), hset.n_canonical(), 0, len(pairs),
                 time.perf_counter() - t0)
    )
    report.converged = (not hset.truncated) and hset.n_canonical() == 1
    report.final_set = hset
    report.burn_in_prefixes = tree.n_prefixes
    report.stored_prefixes = tree.n_prefixes
    report.negatives_total = len(pairs)
    report.oracle_queries = oracle.query_count
    report.discovery_seconds = disc
    report.sat_seconds = sat
    _write_trial_csv(out_dir / f"trial_{spec.seed}.csv", report.rows)
    _write_timing_csv(out_dir / f"timing_{spec.seed}.csv", report.rows)
    _aggregate([report], out_dir / "aggregate.csv")
    emit_memory_report(out_dir, tree, part, pairs)
    with open(out_dir / "summary.txt", "w", encoding="utf-8") as fh:
        fh.write("\n".join(_summary_lines(fixture, [report])) + "\n")
    print(f"exhaustive depth {spec.depth}: {len(hset)} solutions "
          f"({hset.n_canonical()} up to renaming){' [truncated]' if hset.truncated else ''}")
    if len(hset) == 0:
        return EXIT_INFEASIBLE
    return EXIT_OK


def _run_trials(spec: RunSpec, fixture: Fixture, out_dir: Path) -> int:
    runner = run_active if spec.mode == "active" else run_random_baseline
    reports = []
    for t in range(spec.trials):
        trial_seed = spec.seed + t
        cfg = ActiveConfig(
            burn_in_depth=spec.burn_in,
            n_active=spec.n_active,
            budget=spec.budget,
            dfs_node_budget=spec.dfs_budget,
            seed=trial_seed,
            max_depth=spec.max_depth,
            enum_cap=spec.cap,
            burn_in_pair_cap=spec.pair_cap,
            burn_in_sample=spec.pair_sample,
            eps=spec.eps_policy,
        )
        rep = runner(cfg, fixture)
        reports.append(rep)
        _write_trial_csv(out_dir / f"trial_{trial_seed}.csv", rep.rows)
        _write_timing_csv(out_dir / f"timing_{trial_seed}.csv", rep.rows)
        print(f"trial seed={trial_seed}: depth {rep.final_depth()}, "
              f"{rep.rows[-1].raw_count} solutions, converged={rep.converged}")
    _aggregate(reports, out_dir / "aggregate.csv")
    with open(out_dir / "summary.txt", "w", encoding="utf-8") as fh:
        fh.write("\n".join(_summary_lines(fixture, reports)) + "\n")
    last = reports[-1]
    emit_memory_report(out_dir, last.tree, None, None)
    if all(len(r.final_set) == 0 for r in reports if r.final_set is not None):
        return EXIT_INFEASIBLE
    return EXIT_OK


def run(spec: RunSpec) -> int:
    """Execute a run spec; returns the process exit code."""
    fixture = spec.load_fixture()
    if spec.no_stutter:
        fixture.stutter_invariant = False
    out_dir = Path(spec.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if spec.dump_policy:
        fixture.policy().dump_csv(out_dir / "policy.csv")
    if spec.mode == "verify":
        return _run_verify(spec, fixture, out_dir)
    if spec.mode == "exhaustive":
        return _run_exhaustive(spec, fixture, out_dir)
    if spec.mode in ("active", "random_baseline"):
        return _run_trials(spec, fixture, out_dir)
    raise ValueError(f"unknown mode {spec.mode!r}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rminfer", description=__doc__)
    p.add_argument("--mode", required=True,
                   choices=["exhaustive", "active", "random_baseline", "verify"])
    p.add_argument("--fixture", choices=list(FIXTURE_NAMES))
    p.add_argument("--config", help="path to a fixture config file")
    p.add_argument("--depth", type=int, help="evidence depth (exhaustive/verify)")
    p.add_argument("--burn-in", type=int, default=6, dest="burn_in")
    p.add_argument("--budget", type=int, default=250)
    p.add_argument("--n-active", type=int, default=100, dest="n_active")
    p.add_argument("--max-depth", type=int, default=20, dest="max_depth")
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cap", type=int, default=10_000, help="enumeration cap")
    p.add_argument("--eps-policy", type=float, default=EPS_POLICY, dest="eps_policy")
    p.add_argument("--no-stutter", action="store_true", dest="no_stutter",
                   help="disable the non-stuttering constraint and compression")
    p.add_argument("--pair-sample", type=int, default=5_000, dest="pair_sample")
    p.add_argument("--pair-cap", type=int, default=200_000, dest="pair_cap")
    p.add_argument("--dfs-budget", type=int, default=200_000, dest="dfs_budget")
    p.add_argument("--u-max", type=int, dest="u_max")
    p.add_argument("--n-ap", type=int, dest="n_ap")
    p.add_argument("--out", default="runs")
    p.add_argument("--dump-policy", action="store_true", dest="dump_policy")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    spec = RunSpec(**vars(args))
    try:
        return run(spec)
    except (ValueError, ConfigError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TreeOverflowError, MemoryError, SolverLimitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (AssertionError, EncoderError) as exc:
        print(f"internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
