"""Scenario-driven command line.

Subcommands:

* ``run``       execute a scenario: propagate ensembles, run the enabled
                checks, write CSV/TSV/JSON artifacts, plot-data files and
                figures, and a run manifest.  Exit 0 iff every enabled check
                passes (2 on configuration errors, 1 on failed checks).
* ``compare``   integrate both laws from shared starting point sets and
                report trajectory divergence plus the canonicalized
                two-sample marginal comparison.
* ``selftest``  reduced-scale invariant suite, the CI entry point.
* ``transform`` dump the labeled wave function and its fiber components for
                a list of configurations.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .core import LabeledConfiguration, Permutation, canonicalize, uniform_species
from .dynamics import (
    TrajectoryAbort,
    VelocityLaw,
    integrate_trajectory,
    standard_velocity,
    strong_permutation_invariance_check,
    symmetrized_velocity_labeled,
)
from .ensemble import (
    continuity_residual_scan,
    equivariance_test,
    marginal_identity_test,
    propagate_ensemble,
    worker_count,
    _canonical_sort_rows,
    _sample_array,
)
from .scenario import Scenario, ScenarioError, load_scenario, scenario_hash
from .wavefunction import WaveFunction, product_state

_PURPOSE_PROBES = 4
_PURPOSE_TRANSFORM = 5


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: dict

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        keys = ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                         for k, v in self.measured.items())
        return f"[{status}] {self.name}: {keys}"


def _say(quiet: bool, *parts) -> None:
    if not quiet:
        print(*parts)


# checks -------------------------------------------------------------------------


def _check_equivariance(scn: Scenario, psi, law, records, seed, quiet) -> CheckResult:
    tol = scn.tolerances
    report = equivariance_test(records, psi, law,
                               reference_samples=int(tol["reference_samples"]),
                               seed=seed, alpha=float(tol["alpha"]))
    worst = max(a.statistic / a.threshold for s in report.slices for a in s.axes)
    aborted = max(s.aborted_fraction for s in report.slices)
    passed = report.passed and aborted < 0.01
    return CheckResult(f"equivariance[{law.value}]", passed,
                       {"worst_D_over_threshold": worst,
                        "aborted_fraction": aborted}), report


def _check_marginal_identity(scn: Scenario, psi, seed) -> CheckResult:
    tol = scn.tolerances
    t = max(scn.ensemble["observation_times"])
    res = marginal_identity_test(psi, int(scn.ensemble["size"]), t, seed=seed,
                                 alpha=float(tol["alpha"]),
                                 tolerance=scn.integrator_tolerance(psi))
    return CheckResult("marginal_identity", res.passed,
                       {"max_D": res.max_statistic,
                        "threshold": res.axes[0].threshold, "t": t}), res


def _check_strong_invariance(scn: Scenario, psi, seed) -> CheckResult:
    tol = scn.tolerances
    t_end = float(tol["strong_invariance_time"])
    start = _sample_array(psi, 1, seed, purpose=_PURPOSE_PROBES)[0]
    c0 = LabeledConfiguration(start)
    sigma = Permutation.transposition(psi.n_particles, 0, 1)
    itol = scn.integrator_tolerance(psi)
    dev = strong_permutation_invariance_check(psi, c0, sigma, t_end, tolerance=itol)
    limit = float(tol["strong_invariance_factor"]) * itol
    return CheckResult("strong_invariance", dev < limit,
                       {"deviation": dev, "limit": limit})


def _check_disjoint_reduction(scn: Scenario, psi) -> CheckResult:
    rtol = float(scn.tolerances["disjoint_reduction_rtol"])
    if psi.n_particles != 2 or len(scn.terms) != 1 or not psi.is_analytic:
        raise ScenarioError("checks.disjoint_reduction needs a two-particle "
                            "single-product gaussian state")
    packets = scn.terms[0]["packets"]
    worst = 0.0
    for i, p in enumerate(packets):
        single = uniform_species(1, mass=float(scn.species.masses[i]),
                                 hbar=scn.species.hbar)
        one = WaveFunction(single, product_state(
            [p["center"]], [p["width"]],
            [p.get("wavevec", [0.0] * scn.dimension)]), psi.time)
        center = np.asarray(p["center"], dtype=float)
        expected = standard_velocity(one, LabeledConfiguration(center[None, :]))[0]
        both = np.array([q["center"] for q in packets], dtype=float)
        got = symmetrized_velocity_labeled(psi, LabeledConfiguration(both))[i]
        denom = max(float(np.max(np.abs(expected))), 1e-30)
        worst = max(worst, float(np.max(np.abs(got - expected))) / denom)
    return CheckResult("disjoint_reduction", worst < rtol,
                       {"max_rel_deviation": worst, "rtol": rtol})


def _check_continuity(scn: Scenario, psi, law) -> CheckResult:
    tol = scn.tolerances
    t = min(scn.ensemble["observation_times"])
    res = continuity_residual_scan(psi, law, t, dt=float(tol["continuity_dt"]))
    limit = float(tol["continuity_limit"])
    return CheckResult(f"continuity_residual[{law.value}]", res < limit,
                       {"residual": res, "limit": limit, "t": t})


def _check_reduction_identity(scn: Scenario, psi, seed) -> CheckResult:
    """Symmetrized velocity equals the standard one (N = 1, or symmetric state
    with equal masses); checked at |psi|^2-sampled probe points."""
    limit = float(scn.tolerances["reduction_limit"])
    probes = _sample_array(psi, 32, seed, purpose=_PURPOSE_PROBES)
    dev = 0.0
    for pts in probes:
        c = LabeledConfiguration(pts)
        dev = max(dev, float(np.max(np.abs(
            symmetrized_velocity_labeled(psi, c) - standard_velocity(psi, c)))))
    return CheckResult("reduction_identity", dev < limit,
                       {"max_deviation": dev, "limit": limit})


def _resolve_scenario(arg: str) -> Path:
    """Existing path, or a bundled scenario referenced by bare name."""
    path = Path(arg)
    if path.exists():
        return path
    from importlib.resources import files
    name = arg[:-5] if arg.endswith(".yaml") else arg
    bundled = files("idbohm") / "scenarios" / f"{name}.yaml"
    if bundled.is_file():
        return Path(str(bundled))
    raise ScenarioError(f"no scenario file {arg!r} and no bundled scenario of that name")


# run ---------------------------------------------------------------------------


def _cmd_run(args) -> int:
    try:
        scn = load_scenario(_resolve_scenario(args.scenario))
    except (ScenarioError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    quiet = args.quiet
    outdir = Path(args.outdir or Path("runs") / scn.name)
    outdir.mkdir(parents=True, exist_ok=True)
    seed = int(args.seed) if args.seed is not None else int(scn.ensemble["seed"])
    workers = worker_count(args.workers)
    started = time.time()
    _say(quiet, f"scenario {scn.name} (hash {scenario_hash(scn)}), seed {seed}, "
                f"workers {workers}")

    psi = scn.build_wavefunction()
    artifacts: list[str] = []
    results: list[CheckResult] = []
    from . import report as rpt

    records_by_law = {}
    for law in scn.laws:
        spec = scn.ensemble_spec(law, seed)
        records = propagate_ensemble(
            spec, psi, tolerance=scn.integrator_tolerance(psi),
            dt0=scn.integrator["initial_step"], workers=workers,
            wave_step=float(scn.integrator["wave_step"]))
        records_by_law[law] = records
        n_files = int(scn.output["trajectory_files"])
        for k, rec in enumerate(records[:n_files]):
            path = outdir / f"trajectory_{law.value}_{k:03d}.csv"
            rec.to_csv(path)
            artifacts.append(str(path))
        data_path = outdir / f"trajectories_{law.value}.tsv"
        rpt.write_trajectory_plot_data(records, data_path)
        artifacts.append(str(data_path))
        if scn.output["figures"]:
            fig_path = outdir / f"trajectories_{law.value}.png"
            rpt.fig_trajectories(records, fig_path, title=f"{scn.name} [{law.value}]")
            artifacts.append(str(fig_path))
        aborted = sum(1 for r in records if r.status != "completed")
        _say(quiet, f"  propagated {len(records)} {law.value} trajectories "
                    f"({aborted} aborted)")

    if scn.checks["equivariance"]:
        for law in scn.laws:
            res, report = _check_equivariance(scn, psi, law, records_by_law[law],
                                              seed, quiet)
            results.append(res)
            rep_path = outdir / f"equivariance_{law.value}.json"
            report.to_json(rep_path)
            tsv_path = outdir / f"equivariance_{law.value}.tsv"
            report.write_tsv(tsv_path)
            artifacts.extend([str(rep_path), str(tsv_path)])
            if scn.output["figures"]:
                fig_path = outdir / f"equivariance_{law.value}.png"
                rpt.fig_equivariance(records_by_law[law], psi, report, fig_path)
                artifacts.append(str(fig_path))
    if scn.checks["marginal_identity"]:
        res, mres = _check_marginal_identity(scn, psi, seed)
        results.append(res)
        path = outdir / "marginal_identity.json"
        with open(path, "w") as fh:
            json.dump(mres.to_json_dict(), fh, indent=2)
        artifacts.append(str(path))
    if scn.checks["reduction_identity"]:
        results.append(_check_reduction_identity(scn, psi, seed))
    if scn.checks["strong_invariance"]:
        results.append(_check_strong_invariance(scn, psi, seed))
    if scn.checks["disjoint_reduction"]:
        results.append(_check_disjoint_reduction(scn, psi))
    if scn.checks["continuity_residual"]:
        for law in scn.laws:
            results.append(_check_continuity(scn, psi, law))

    if not psi.is_analytic and psi.state.geometry.n_axes == 2:
        for t in scn.ensemble["observation_times"]:
            psi_t = psi.evolve(t - psi.time)
            table = outdir / f"density_heatmap_t{t:g}.tsv"
            rpt.write_density_heatmap_table(psi_t, table)
            artifacts.append(str(table))
            if scn.output["figures"]:
                fig = outdir / f"density_heatmap_t{t:g}.png"
                rpt.fig_density_heatmap(psi_t, fig)
                artifacts.append(str(fig))

    for res in results:
        _say(quiet, res.line())
    manifest = {
        "scenario": scn.name,
        "scenario_hash": scenario_hash(scn),
        "tool_version": __version__,
        "seed": seed,
        "workers": workers,
        "wall_clock_seconds": time.time() - started,
        "laws": [l.value for l in scn.laws],
        "checks": [{"name": r.name, "passed": r.passed, "measured": r.measured}
                   for r in results],
        "artifacts": artifacts,
    }
    manifest_path = outdir / "manifest.json"
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    _say(quiet, f"manifest: {manifest_path}")
    return 0 if all(r.passed for r in results) else 1


# compare -------------------------------------------------------------------------


def _cmd_compare(args) -> int:
    try:
        scn = load_scenario(_resolve_scenario(args.scenario))
    except (ScenarioError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    quiet = args.quiet
    law_a, law_b = VelocityLaw(args.law_a), VelocityLaw(args.law_b)
    outdir = Path(args.outdir or Path("runs") / f"{scn.name}_compare")
    outdir.mkdir(parents=True, exist_ok=True)
    seed = int(args.seed) if args.seed is not None else int(scn.ensemble["seed"])
    psi = scn.build_wavefunction()
    t_end = max(scn.ensemble["observation_times"])
    obs = np.linspace(psi.time, t_end, 65)[1:]
    tol = scn.integrator_tolerance(psi)

    probes = _sample_array(psi, int(args.probes), seed, purpose=_PURPOSE_PROBES)
    divergence = 0.0
    recs_a, recs_b = [], []
    for pts in probes:
        c = LabeledConfiguration(pts)
        q, _ = canonicalize(c)
        rec_a = integrate_trajectory(law_a, psi, c if law_a is VelocityLaw.STANDARD else q,
                                     t_end, tolerance=tol, observation_times=obs,
                                     wave_step=float(scn.integrator["wave_step"]))
        rec_b = integrate_trajectory(law_b, psi, c if law_b is VelocityLaw.STANDARD else q,
                                     t_end, tolerance=tol, observation_times=obs,
                                     wave_step=float(scn.integrator["wave_step"]))
        if rec_a.status != "completed" or rec_b.status != "completed":
            continue
        sa = _canonical_sort_rows(rec_a.states)
        sb = _canonical_sort_rows(rec_b.states)
        divergence = max(divergence, float(np.max(np.abs(sa - sb))))
        recs_a.append(rec_a)
        recs_b.append(rec_b)

    marginal = marginal_identity_test(psi, int(scn.ensemble["size"]), t_end,
                                      seed=seed, tolerance=tol,
                                      law_a=law_a, law_b=law_b)
    report = {
        "scenario": scn.name,
        "scenario_hash": scenario_hash(scn),
        "law_a": law_a.value,
        "law_b": law_b.value,
        "probes": int(args.probes),
        "max_trajectory_divergence": divergence,
        "integrator_tolerance": tol,
        "marginal_two_sample": marginal.to_json_dict(),
    }
    path = outdir / "compare.json"
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2)
    from . import report as rpt
    if recs_a and recs_b:
        rpt.fig_compare_trajectories(recs_a, recs_b, (law_a.value, law_b.value),
                                     outdir / "compare.png")
    _say(quiet, f"max trajectory divergence ({law_a.value} vs {law_b.value}): "
                f"{divergence:.6g}")
    _say(quiet, f"marginal two-sample: max D = {marginal.max_statistic:.4g}, "
                f"threshold {marginal.axes[0].threshold:.4g}, "
                f"{'pass' if marginal.passed else 'FAIL'}")
    _say(quiet, f"report: {path}")
    return 0


# selftest ---------------------------------------------------------------------------


def _cmd_selftest(args) -> int:
    from .selftest import run_selftest
    ok = run_selftest(quiet=args.quiet, outdir=args.outdir)
    return 0 if ok else 1


# transform -----------------------------------------------------------------------


def _cmd_transform(args) -> int:
    try:
        scn = load_scenario(_resolve_scenario(args.scenario))
    except (ScenarioError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    from .bundle import fiber_to_json_dict, lift
    outdir = Path(args.outdir or Path("runs") / f"{scn.name}_transform")
    outdir.mkdir(parents=True, exist_ok=True)
    seed = int(args.seed) if args.seed is not None else int(scn.ensemble["seed"])
    psi = scn.build_wavefunction().evolve(float(args.time))
    if args.points:
        with open(args.points) as fh:
            pts = np.asarray(json.load(fh), dtype=float)
    else:
        pts = _sample_array(psi, int(args.count), seed, purpose=_PURPOSE_TRANSFORM)
    entries = []
    for row in pts:
        c = LabeledConfiguration(row)
        q, _ = canonicalize(c)
        value = psi.evaluate(c)
        entry = {
            "labeled": row.tolist(),
            "psi_value": [[float(z.real), float(z.imag)] for z in value],
            "fiber": fiber_to_json_dict(lift(psi, q)),
        }
        entries.append(entry)
    path = outdir / "transform.json"
    with open(path, "w") as fh:
        json.dump({"scenario": scn.name, "time": psi.time, "entries": entries}, fh,
                  indent=2)
    _say(args.quiet, f"wrote {len(entries)} transforms: {path}")
    return 0


# entry point -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="idbohm",
        description="Bohmian trajectory simulator on labeled and unordered "
                    "configuration spaces")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--outdir", default=None, help="artifact directory")
        p.add_argument("--seed", default=None, help="override the scenario seed")
        p.add_argument("--workers", type=int, default=None,
                       help=f"parallel workers (default $IDBOHM_WORKERS or 1)")
        p.add_argument("-q", "--quiet", action="store_true")

    p_run = sub.add_parser("run", help="run a scenario and its checks")
    p_run.add_argument("scenario")
    common(p_run)
    p_run.set_defaults(func=_cmd_run)

    p_cmp = sub.add_parser("compare", help="compare two velocity laws")
    p_cmp.add_argument("scenario")
    p_cmp.add_argument("--law-a", default="standard", choices=[l.value for l in VelocityLaw])
    p_cmp.add_argument("--law-b", default="identity", choices=[l.value for l in VelocityLaw])
    p_cmp.add_argument("--probes", type=int, default=16)
    common(p_cmp)
    p_cmp.set_defaults(func=_cmd_compare)

    p_self = sub.add_parser("selftest", help="reduced-scale invariant suite")
    common(p_self)
    p_self.set_defaults(func=_cmd_selftest)

    p_tr = sub.add_parser("transform", help="dump labeled values and fiber components")
    p_tr.add_argument("scenario")
    p_tr.add_argument("--points", default=None,
                      help="JSON file with labeled configurations")
    p_tr.add_argument("--count", type=int, default=4,
                      help="configurations to sample when --points is absent")
    p_tr.add_argument("--time", type=float, default=0.0)
    common(p_tr)
    p_tr.set_defaults(func=_cmd_transform)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, TrajectoryAbort) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
