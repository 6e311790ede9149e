"""Command line interface.

Exit codes: 0 success, 2 configuration error, 3 numeric error,
4 convergence error, 5 input/output error.
"""
import argparse
import json
import os
import sys
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ScoreApproxError

EXIT_CODES = {"config": 2, "numeric": 3, "convergence": 4, "io": 5}
COMMANDS = ("simulate", "fit", "fit-spacetime", "n-sweep", "trace-study", "verify-bounds", "bench")


@dataclass
class RunConfig:
    command: str
    grid: str = "32x32"
    occlude: str = "disc:40,60,10"
    model: str = "powerlaw"
    truth: list = None
    tau: int = None
    probes: int = 64
    design: str = "independent"
    seed: int = 0
    backend: str = "circulant"
    solver: str = "block-cg"
    tol: float = 1e-10
    maxiter: int = 1000
    precond: str = "none"
    precond_depth: int = 20
    n_info: int = 100
    data: str = None
    out: str = None
    threads: int = 1
    verbose: bool = False
    options: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def parse_grid(spec):
    try:
        dims = tuple(int(x) for x in spec.lower().split("x"))
    except ValueError:
        raise _config_error(f"bad grid spec {spec!r}; expected e.g. 32x32")
    if not dims or any(m < 2 for m in dims):
        raise _config_error(f"bad grid spec {spec!r}")
    return dims


def parse_floats(spec):
    if spec is None:
        return None
    try:
        return [float(x) for x in str(spec).split(",")]
    except ValueError:
        raise _config_error(f"bad number list {spec!r}")


def _config_error(msg):
    from .errors import ParameterDomainError

    return ParameterDomainError(msg)


class IOFailure(ScoreApproxError):
    category = "io"


def build_grid(cfg):
    from .gridfilter import build_disc_occluded_grid, full_grid, spacing_for_extent

    dims = parse_grid(cfg.grid)
    spacing = spacing_for_extent(dims)
    if cfg.occlude in (None, "", "none"):
        return full_grid(dims, spacing)
    kind, _, args = cfg.occlude.partition(":")
    if kind != "disc":
        raise _config_error(f"unknown occlusion {cfg.occlude!r}")
    vals = parse_floats(args)
    if len(vals) != len(dims) + 1:
        raise _config_error("disc occlusion needs center coordinates and a radius")
    return build_disc_occluded_grid(dims, spacing, vals[:-1], vals[-1])


def build_model(cfg, d):
    from .kernels import MaternModel, MaternParams, PowerLawModel, PowerLawParams

    truth = cfg.truth
    if cfg.model == "powerlaw":
        truth = truth or [1.5] + [7.0, 10.0][:d] + [10.0] * max(0, d - 2)
        if len(truth) != 1 + d:
            raise _config_error(f"power-law truth needs {1 + d} values")
        return PowerLawModel(PowerLawParams(truth[0], tuple(truth[1:])))
    if cfg.model == "matern":
        truth = truth or [1.0, 1.0, 10.0]
        if len(truth) != 3:
            raise _config_error("matern truth is nu,sigma2,range")
        return MaternModel(MaternParams(*truth), d)
    raise _config_error(f"unknown model {cfg.model!r}")


def resolve_tau(cfg, model):
    from .gridfilter import choose_tau

    if cfg.tau is not None:
        return cfg.tau
    if cfg.model == "powerlaw":
        return choose_tau(model.params.alpha, model.d)
    return 0


def effective_probes(cfg):
    from .probes import is_power_of_two

    N = cfg.probes
    if N < 1:
        raise _config_error("--probes must be positive")
    if cfg.design == "dependent" and not is_power_of_two(N):
        rounded = 1 << (N.bit_length() - 1)
        warnings.warn(f"dependent design needs a power of two; using N={rounded} instead of {N}")
        return rounded
    return N


def solver_options(cfg):
    from .linsolve import SolveOptions

    cb = None
    if cfg.verbose:
        def cb(it, x, rel):
            res = np.atleast_1d(rel)
            print(f"  solve iter {it}: max residual {res.max():.3e} ({res.size} columns)",
                  file=sys.stderr)
    return SolveOptions(cfg.tol, cfg.maxiter, None, cfg.solver, cb)


def _write(path, text):
    if path is None:
        sys.stdout.write(text)
        return
    try:
        with open(path, "w") as fh:
            fh.write(text)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(cfg):
    from .gridfilter import build_filter_plan
    from .operators import simulate_gp

    grid = build_grid(cfg)
    model = build_model(cfg, grid.d)
    tau = resolve_tau(cfg, model)
    plan = build_filter_plan(grid, tau)
    Z = simulate_gp(model, grid, plan, cfg.seed)
    out = cfg.out or "simulated.npz"
    try:
        np.savez(out, Z=Z, dims=np.array(grid.dims), mask=grid.mask, tau=tau,
                 truth=model.theta, config=cfg.to_json())
    except OSError as exc:
        raise IOFailure(f"cannot write {out}: {exc}")
    print(f"wrote {Z.size} filtered values (tau={tau}) to {out}")


def _load_data(cfg, grid, plan):
    try:
        with np.load(cfg.data) as f:
            Z = f["Z"]
            if "mask" in f and f["mask"].shape != grid.mask.shape:
                raise _config_error("data file grid does not match --grid")
    except (OSError, KeyError, ValueError) as exc:
        raise IOFailure(f"cannot read data file {cfg.data}: {exc}")
    if Z.size != plan.n_f:
        raise _config_error(f"data has {Z.size} values, filtered grid has {plan.n_f}")
    return Z


def cmd_fit(cfg):
    from .fitdriver import FitOptions, make_powerlaw_problem, solve_fit
    from .gridfilter import build_filter_plan
    from .operators import simulate_gp
    from .report import format_fit_report

    if cfg.model != "powerlaw":
        raise _config_error("fit supports the power-law model")
    grid = build_grid(cfg)
    model = build_model(cfg, grid.d)
    tau = resolve_tau(cfg, model)
    plan = build_filter_plan(grid, tau)
    Z = _load_data(cfg, grid, plan) if cfg.data else simulate_gp(model, grid, plan, cfg.seed)
    N = effective_probes(cfg)
    opts = FitOptions(backend=cfg.backend, solver=solver_options(cfg), precond=cfg.precond,
                      precond_depth=cfg.precond_depth, n_info=cfg.n_info)
    problem = make_powerlaw_problem(grid, Z, tau, N, cfg.seed + 1, cfg.design, opts)
    fit = solve_fit(problem)
    conf = {"command": "fit", "config": cfg.to_json(), "tau": tau, "N": N}
    _write(cfg.out, format_fit_report(fit, conf, grid.describe()))


def cmd_fit_spacetime(cfg):
    from .fitdriver import FitOptions, solve_fit_spacetime
    from .kernels import SpaceTimeModel, SpaceTimeParams
    from .operators import SpaceTimeGrid, simulate_gp
    from .probes import sample_independent_probes
    from .report import format_fit_report

    o = cfg.options
    n_lat, n_lon, n_days = int(o.get("lats", 10)), int(o.get("lons", 60)), int(o.get("days", 10))
    lats = np.arange(n_lat) - (n_lat - 1) / 2.0
    st = SpaceTimeGrid(lats, 0.0, 360.0 / n_lon, n_lon, n_days)
    truth = cfg.truth or [1.3e-3, 1.9, 11.5, -8.2]
    model = SpaceTimeModel(SpaceTimeParams(*truth))
    if cfg.data:
        try:
            with np.load(cfg.data) as f:
                Z = f["Z"]
        except (OSError, KeyError, ValueError) as exc:
            raise IOFailure(f"cannot read data file {cfg.data}: {exc}")
    else:
        Z = simulate_gp(model, st, seed=cfg.seed)
    backend = "block-circulant" if cfg.backend == "circulant" else cfg.backend
    opts = FitOptions(backend=backend, solver=solver_options(cfg),
                      precond=cfg.precond if cfg.precond != "none" else "banded-ichol",
                      precond_depth=cfg.precond_depth, n_info=cfg.n_info)
    probes = sample_independent_probes(st.n, cfg.probes, cfg.seed + 1)
    phi0 = parse_floats(o.get("init")) if o.get("init") else None
    fit = solve_fit_spacetime(st, Z, probes, opts, phi0=phi0)
    conf = {"command": "fit-spacetime", "config": cfg.to_json()}
    _write(cfg.out, format_fit_report(fit, conf, st.describe(), "space-time fit report"))


def cmd_n_sweep(cfg):
    from .fitdriver import SweepConfig, n_sweep_study
    from .report import format_table

    o = cfg.options
    truth = tuple(cfg.truth) if cfg.truth else (1.5, 7.0, 10.0)
    sc = SweepConfig(
        dims=parse_grid(cfg.grid), truth=truth, disc=tuple(parse_floats(cfg.occlude.split(":")[1]))
        if cfg.occlude.startswith("disc:") else (0.0, 0.0, 0.0),
        tau=cfg.tau if cfg.tau is not None else 1,
        Ns=tuple(int(x) for x in str(o.get("Ns", "1,2,4,8,16,32,64")).split(",")),
        reps=int(o.get("reps", 50)), seed=cfg.seed,
        backend="dense" if cfg.solver == "direct" else cfg.backend, method=cfg.solver,
        threads=cfg.threads,
    )
    res = n_sweep_study(sc)
    rows = []
    for design, per_N in res["ratios"].items():
        for N, r in per_N.items():
            rows.append([design, str(N)] + [float(x) for x in r]
                        + [str(res["failures"][design][N])])
    names = ["alpha"] + [f"l{k + 1}" for k in range(len(truth) - 1)]
    header = ["design", "N"] + [f"mse_ratio_{n}" for n in names] + ["failures"]
    _write(cfg.out, f"# reps={res['reps']} exact_failures={res['exact_failures']}\n"
           + format_table(header, rows))


def cmd_trace_study(cfg):
    from .bounds import trace_study
    from .gridfilter import build_filter_plan, zigzag_blocking
    from .operators import dense_matrices
    from .report import format_table

    grid = build_grid(cfg)
    model = build_model(cfg, grid.d)
    plan = build_filter_plan(grid, resolve_tau(cfg, model))
    if plan.n_f > 3000:
        raise _config_error("trace study uses dense matrices; choose a smaller grid")
    K, Ks = dense_matrices(model, grid, plan)
    Ns = tuple(int(x) for x in str(cfg.options.get("Ns", "1,2,4,8,16")).split(","))
    rows = trace_study(K, Ks, Ns, int(cfg.options.get("reps", 200)), cfg.seed,
                       lambda N: zigzag_blocking(grid, plan, N))
    names = model.param_names
    _write(cfg.out, format_table(["design", "N", "parameter", "variance"],
                                 [(d, str(N), names[i], v) for d, N, i, v in rows]))


def cmd_verify_bounds(cfg):
    from .bounds import kappa_growth, verify_bounds_suite

    n = int(cfg.options.get("n", 8))
    rows = verify_bounds_suite(n, cfg.probes, seeds=tuple(range(cfg.seed, cfg.seed + 3)))
    lines = ["check\tinstance\tvalue\tthreshold\tresult"]
    for check, inst, val, thr, ok in rows:
        lines.append(f"{check}\t{inst}\t{val:.6g}\t{thr:.3g}\t{'PASS' if ok else 'FAIL'}")
    if str(cfg.options.get("trend", "1")) != "0":
        lines.append("")
        lines.append("n\tkappa\tnorm_Iinv_J")
        for nn, kap, nrm in kappa_growth():
            lines.append(f"{nn}\t{kap:.6g}\t{nrm:.6g}")
    overall = all(r[-1] for r in rows)
    lines.append(f"overall: {'PASS' if overall else 'FAIL'}")
    _write(cfg.out, "\n".join(lines) + "\n")
    return 0 if overall else 1


def cmd_bench(cfg):
    from .operators import bench_matvec
    from .report import format_table

    sizes = [parse_grid(s) for s in str(cfg.options.get("sizes", "32x32,64x64,128x128")).split(",")]
    backends = tuple(str(cfg.options.get("backends", "circulant")).split(","))
    rows = bench_matvec(sizes, backends, repeats=int(cfg.options.get("repeats", 5)))
    _write(cfg.out, format_table(["n", "backend", "seconds"], [(str(n), b, t) for n, b, t in rows]))


HANDLERS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "fit-spacetime": cmd_fit_spacetime,
    "n-sweep": cmd_n_sweep,
    "trace-study": cmd_trace_study,
    "verify-bounds": cmd_verify_bounds,
    "bench": cmd_bench,
}


def build_parser():
    env_seed = int(os.environ.get("SCOREAPPROX_SEED", 0))
    env_threads = int(os.environ.get("SCOREAPPROX_THREADS", 1))
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--grid", default="32x32", help="grid dims, e.g. 32x32")
    common.add_argument("--occlude", default="disc:40,60,10",
                        help="'none' or disc:cx,cy,radius in grid units of a 100-wide square")
    common.add_argument("--model", default="powerlaw", choices=["powerlaw", "matern"])
    common.add_argument("--truth", help="comma-separated parameters used for simulation")
    common.add_argument("--tau", type=int, help="number of Laplacian filtering stages")
    common.add_argument("--probes", "--N", dest="probes", type=int, default=64,
                        help="number of probe vectors N")
    common.add_argument("--design", default="independent", choices=["independent", "dependent"])
    common.add_argument("--seed", type=int, default=env_seed)
    common.add_argument("--backend", default="circulant",
                        choices=["circulant", "dense", "block-circulant"])
    common.add_argument("--solver", default="block-cg", choices=["block-cg", "cg", "direct"])
    common.add_argument("--tol", type=float, default=1e-10)
    common.add_argument("--maxiter", type=int, default=1000)
    common.add_argument("--precond", default="none",
                        choices=["none", "laplacian-filter", "banded-ichol"])
    common.add_argument("--precond-depth", type=int, default=20)
    common.add_argument("--n-info", type=int, default=100, help="probes for information estimates")
    common.add_argument("--data", help="input .npz file with filtered data Z")
    common.add_argument("--out", help="output file (stdout when omitted)")
    common.add_argument("--threads", type=int, default=env_threads)
    common.add_argument("--verbose", action="store_true", help="print per-iteration solver trace")
    common.add_argument("--dry-run", action="store_true", help="print resolved config and exit")
    common.add_argument("--config", help="JSON run config (as printed by --dry-run) to replay")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="command-specific option (reps, Ns, n, sizes, lats, lons, days, ...)")

    parser = argparse.ArgumentParser(prog="scoreapprox",
                                     description="Stochastic score-equation fitting for Gaussian processes.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "verify-bounds":
            p.add_argument("--n", type=int, help="instance size (at most 12)")
    return parser


def config_from_args(args):
    options = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise _config_error(f"--set expects KEY=VALUE, got {item!r}")
        options[key] = value
    if getattr(args, "n", None) is not None:
        options["n"] = args.n
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = RunConfig.from_json(fh.read())
        except (OSError, ValueError, TypeError) as exc:
            raise IOFailure(f"cannot read config {args.config}: {exc}")
        if cfg.command != args.command:
            raise _config_error(f"config is for {cfg.command!r}, not {args.command!r}")
        return cfg
    return RunConfig(
        command=args.command, grid=args.grid, occlude=args.occlude, model=args.model,
        truth=parse_floats(args.truth), tau=args.tau, probes=args.probes, design=args.design,
        seed=args.seed, backend=args.backend, solver=args.solver, tol=args.tol,
        maxiter=args.maxiter, precond=args.precond, precond_depth=args.precond_depth,
        n_info=args.n_info, data=args.data, out=args.out, threads=args.threads,
        verbose=args.verbose, options=options,
    )


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
        if args.dry_run:
            print(cfg.to_json())
            return 0
        status = HANDLERS[cfg.command](cfg)
        return int(status or 0)
    except ScoreApproxError as exc:
        print(f"error ({exc.category}): {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except ValueError as exc:
        print(f"error (config): {exc}", file=sys.stderr)
        return EXIT_CODES["config"]
    except OSError as exc:
        print(f"error (io): {exc}", file=sys.stderr)
        return EXIT_CODES["io"]


if __name__ == "__main__":
    sys.exit(main())
