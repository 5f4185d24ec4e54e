# SPDX-License-Identifier: MIT
#
# twfm command line: simulate, fit, study, asymp, curve, loglik
#

import argparse
import dataclasses
import datetime
import logging
import pathlib
import sys
import typing as T

import numpy as np

from . import __version__, _io
from .asymptotics import limiting_variances, loading_ci, variance_curve
from .config import FitConfig, StudyConfig, load
from .errors import ConfigError, Error, InputError
from .estimator import fit
from .model import DataMatrix, Dims
from .sampler import FactorDistribution, sample, sample_params
from .spectral import log_likelihood
from .study import CELL_SEED_OFFSET, delta_sweep, run_study, write_study, write_sweep

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CAP = 2


@dataclasses.dataclass
class RunManifest:
    """Everything needed to re-run a command, written as ``manifest.json``"""

    command: str
    argv: T.List[str]
    config: T.Dict[str, T.Any]
    seeds: T.Dict[str, int]
    version: str
    started: str
    finished: str = ""
    inputs: T.Dict[str, str] = dataclasses.field(default_factory=dict)
    """Input path to sha256"""
    outputs: T.Dict[str, str] = dataclasses.field(default_factory=dict)
    """Output file name to sha256"""
    exit_code: int = EXIT_OK


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


class _Run:
    """Output directory bookkeeping shared by the subcommands"""

    def __init__(self, args: argparse.Namespace, argv: T.List[str]):
        self.out = pathlib.Path(args.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(
            command=args.command,
            argv=list(argv),
            config={},
            seeds={},
            version=__version__,
            started=_now(),
        )
        self.written: T.List[pathlib.Path] = []

    def path(self, name: str) -> pathlib.Path:
        p = self.out / name
        self.written.append(p)
        return p

    def input(self, path: T.Union[str, pathlib.Path]) -> pathlib.Path:
        p = pathlib.Path(path)
        if not p.is_file():
            raise InputError(f"{p}: no such file")
        self.manifest.inputs[str(p)] = _io.file_digest(p)
        return p

    def finish(self, code: int) -> int:
        m = self.manifest
        m.finished = _now()
        m.exit_code = code
        m.outputs = {p.name: _io.file_digest(p) for p in self.written if p.is_file()}
        _io.dump_json(self.out / "manifest.json", dataclasses.asdict(m))
        for p in self.written:
            logger.info("wrote %s", p)
        return code


def _seed(args: argparse.Namespace, default: int = 0) -> int:
    return default if args.seed is None else args.seed


def _read_data(run: _Run, args: argparse.Namespace) -> DataMatrix:
    path = run.input(args.input)
    return DataMatrix.from_array(_io.read_matrix_csv(path, header=args.header), center=args.center)


def _read_params(run: _Run, path: str):
    data = _io.load_json(run.input(path))
    # fit documents nest the parameters
    if "params" in data and isinstance(data["params"], dict):
        data = data["params"]
    return _io.params_from_dict(data)


#
# Subcommands
#


def cmd_simulate(args: argparse.Namespace, run: _Run) -> int:
    seed = _seed(args)
    if args.params:
        params = _read_params(run, args.params)
        params_seed = None
    else:
        if args.p is None or args.q is None or args.psiF is None or args.psiE is None:
            raise ConfigError("simulate needs --p, --q, --psiF and --psiE (or --params)")
        dims = Dims(args.p, args.q, len(args.psiF), len(args.psiE))
        params_seed = seed + CELL_SEED_OFFSET
        params = sample_params(dims, args.psiF, args.psiE, args.sigma2, seed=params_seed)
    dist = FactorDistribution(kind=args.dist, df=args.df)
    bundle = sample(params, dist=dist, seed=seed)

    run.manifest.seeds = {"sample": seed}
    if params_seed is not None:
        run.manifest.seeds["params"] = params_seed
    run.manifest.config = {"dims": dataclasses.asdict(params.dims), "dist": dataclasses.asdict(dist)}

    _io.write_matrix_csv(run.path("X.csv"), bundle.X.values)
    _io.dump_json(run.path("params.json"), _io.params_to_dict(params))
    _io.dump_json(
        run.path("bundle.json"),
        {
            "params": _io.params_to_dict(params),
            "seed": seed,
            "factor_dist": dataclasses.asdict(dist),
            "F": bundle.scores.F,
            "E": bundle.scores.E,
        },
    )
    return EXIT_OK


def _fit_config(args: argparse.Namespace) -> FitConfig:
    return FitConfig(
        err0=args.err0,
        eps0=args.eps0,
        max_outer=args.max_outer,
        max_inner=args.max_inner,
        init=args.init,
        restarts=args.restarts,
        restart_seed=_seed(args),
        label_check=not args.no_label_check,
        gradient_check=not args.no_gradient,
    )


def _write_scores(path: pathlib.Path, F: np.ndarray, E: np.ndarray) -> None:
    rows = []
    for axis, S in (("row", F), ("column", E)):
        for i, j in np.ndindex(*S.shape):
            rows.append([axis, i, j, float(S[i, j])])
    _io.write_table_csv(path, ["axis", "index", "factor", "score"], rows)


def cmd_fit(args: argparse.Namespace, run: _Run) -> int:
    X = _read_data(run, args)
    p, q = X.shape
    dims = Dims(p, q, args.r, args.c)
    config = _fit_config(args)
    initial = _read_params(run, args.init_params) if args.init_params else None
    run.manifest.config = {"fit": dataclasses.asdict(config), "r": args.r, "c": args.c,
                           "center": args.center, "header": args.header}
    run.manifest.seeds = {"restart_seed": config.restart_seed}

    result = fit(X, dims, config, initial=initial)
    _io.dump_json(
        run.path(args.out),
        {
            "params": _io.params_to_dict(result.theta_hat),
            "loglik": result.loglik,
            "loglik_trace": result.loglik_trace,
            "inner_iters": result.inner_iters,
            "converged": result.converged,
            "stop_reason": result.stop_reason,
            "gradient_norm": result.gradient_norm if np.isfinite(result.gradient_norm) else None,
            "scale_trace": result.scale_trace,
            "inner_caps": result.inner_caps,
            "floored": result.floored,
            "warnings": result.warnings,
            "restart_logliks": result.restart_logliks,
            "labels": result.labels,
            "label_logliks": result.label_logliks,
            "centered": X.centered,
        },
    )
    _write_scores(run.path(args.scores_out), result.scores.F, result.scores.E)
    if not result.converged:
        logger.warning("fit stopped after max_outer=%d iterations", config.max_outer)
        return EXIT_CAP
    return EXIT_OK


def cmd_study(args: argparse.Namespace, run: _Run) -> int:
    data = _io.load_json(run.input(args.config))
    data.pop("schema_version", None)
    config = load(data, StudyConfig, "study config")
    if args.seed is not None:
        config = dataclasses.replace(config, base_seed=args.seed)
    if args.threads is not None:
        config = dataclasses.replace(config, threads=args.threads)
    run.manifest.config = dataclasses.asdict(config)
    run.manifest.seeds = {"base_seed": config.base_seed}

    if config.delta_grid is not None:
        points = delta_sweep(config)
        write_sweep(run.path("sweep.csv"), points)
        capped = any(pt.failures for pt in points)
    else:
        result = run_study(config)
        for path in write_study(run.out, result):
            run.written.append(path)
        capped = result.hit_cap
    if capped:
        logger.warning("some replicates failed or stopped at max_outer")
        return EXIT_CAP
    return EXIT_OK


def cmd_asymp(args: argparse.Namespace, run: _Run) -> int:
    params = _read_params(run, args.fit)
    run.manifest.config = {"level": args.level, "y": args.y}
    theory = limiting_variances(params, y=args.y)
    rows = []
    for j, v in enumerate(np.diag(theory.sigmaL)):
        rows.append(["sigmaL", j, v])
    for i, v in enumerate(np.diag(theory.sigmaLambda)):
        rows.append(["sigmaLambda", i, v])
    for j, v in enumerate(theory.varPsiF):
        rows.append(["varPsiF", j, v])
    for i, v in enumerate(theory.varPsiE):
        rows.append(["varPsiE", i, v])
    rows.append(["varSigma2", 0, theory.varSigma2])
    _io.write_table_csv(run.path("variances.csv"), ["quantity", "index", "value"], rows)

    ci = loading_ci(params, level=args.level, y=args.y)
    rows = []
    for name, M, lo, hi, flags in (
        ("L", params.L, ci.L_lower, ci.L_upper, ci.unreliable_L),
        ("Lambda", params.Lambda, ci.Lambda_lower, ci.Lambda_upper, ci.unreliable_Lambda),
    ):
        for i, j in np.ndindex(*M.shape):
            rows.append([name, i, j, float(M[i, j]), float(lo[i, j]), float(hi[i, j]), bool(flags[j])])
    _io.write_table_csv(
        run.path("ci.csv"),
        ["matrix", "row", "column", "estimate", "lower", "upper", "unreliable"],
        rows,
    )
    if ci.any_unreliable:
        logger.warning("some intervals are unreliable: row and column variances nearly coincide")
    return EXIT_OK


def parse_grid(text: str) -> np.ndarray:
    """``start:stop:step`` with both ends included"""
    try:
        start, stop, step = (float(part) for part in text.split(":"))
    except ValueError:
        raise ConfigError(f"grid must be start:stop:step, got {text!r}") from None
    if not step > 0 or stop < start:
        raise ConfigError(f"grid {text!r} needs step > 0 and stop >= start")
    n = int(round((stop - start) / step)) + 1
    return start + step * np.arange(n)


def cmd_curve(args: argparse.Namespace, run: _Run) -> int:
    grid = parse_grid(args.grid)
    run.manifest.config = {"sigma2": args.sigma2, "psiF": args.psiF, "y": args.y, "grid": args.grid}
    points = variance_curve(args.sigma2, args.psiF, args.y, grid)
    _io.write_table_csv(
        run.path("curve.csv"),
        ["delta", "g", "valid"],
        ([pt.delta, pt.g, pt.valid] for pt in points),
    )
    return EXIT_OK


def cmd_loglik(args: argparse.Namespace, run: _Run) -> int:
    params = _read_params(run, args.params)
    X = _read_data(run, args)
    run.manifest.config = {"center": args.center, "header": args.header}
    value = log_likelihood(params, X)
    _io.dump_json(run.path("loglik.json"), {"loglik": value})
    if not args.quiet:
        print(_io.format_float(value))
    return EXIT_OK


#
# Parser
#


def _data_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--input", required=True, help="CSV data matrix, one row per line")
    parser.add_argument("--header", action="store_true", help="skip the first line of the CSV")
    parser.add_argument("--center", action="store_true", help="subtract column means")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed")
    common.add_argument("--threads", type=int, default=None, help="worker threads for studies")
    common.add_argument("--out-dir", default=".", help="directory for output files")
    common.add_argument("--quiet", action="store_true", help="only log warnings")

    parser = argparse.ArgumentParser(
        prog="twfm", description="Two-way factor model estimation and simulation"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", parents=[common], help="draw parameters and a data matrix")
    sp.add_argument("--p", type=int)
    sp.add_argument("--q", type=int)
    sp.add_argument("--psiF", type=float, nargs="+", help="row factor variances")
    sp.add_argument("--psiE", type=float, nargs="+", help="column factor variances")
    sp.add_argument("--sigma2", type=float, default=0.01)
    sp.add_argument("--params", help="simulate from this parameter JSON instead")
    sp.add_argument("--dist", choices=["gaussian", "centered_chi_square"], default="gaussian")
    sp.add_argument("--df", type=float, default=1.0)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("fit", parents=[common], help="maximum likelihood fit of a CSV matrix")
    _data_options(sp)
    sp.add_argument("--r", type=int, required=True, help="number of row factors")
    sp.add_argument("--c", type=int, required=True, help="number of column factors")
    sp.add_argument("--err0", type=float, default=0.01)
    sp.add_argument("--eps0", type=float, default=0.005)
    sp.add_argument("--max-outer", type=int, default=500)
    sp.add_argument("--max-inner", type=int, default=200)
    sp.add_argument("--init", default="svd", help="svd, random:<seed> or provided")
    sp.add_argument("--init-params", help="starting parameter JSON")
    sp.add_argument("--restarts", type=int, default=1)
    sp.add_argument(
        "--no-label-check",
        action="store_true",
        help="do not also fit from the svd start with row and column labels exchanged",
    )
    sp.add_argument("--no-gradient", action="store_true", help="skip the gradient diagnostic")
    sp.add_argument("--out", default="fit.json")
    sp.add_argument("--scores-out", default="scores.csv")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("study", parents=[common], help="run a Monte Carlo study")
    sp.add_argument("--config", required=True, help="study configuration JSON")
    sp.set_defaults(func=cmd_study)

    sp = sub.add_parser("asymp", parents=[common], help="asymptotic variances and intervals")
    sp.add_argument("--fit", required=True, help="fit or parameter JSON")
    sp.add_argument("--level", type=float, default=0.95)
    sp.add_argument("--y", type=float, default=None, help="aspect ratio, default p/q")
    sp.set_defaults(func=cmd_asymp)

    sp = sub.add_parser("curve", parents=[common], help="scalar loading variance over a grid of delta")
    sp.add_argument("--sigma2", type=float, required=True)
    sp.add_argument("--psiF", type=float, required=True)
    sp.add_argument("--y", type=float, default=1.0)
    sp.add_argument("--grid", required=True, help="start:stop:step")
    sp.set_defaults(func=cmd_curve)

    sp = sub.add_parser("loglik", parents=[common], help="log-likelihood of parameters on data")
    sp.add_argument("--params", required=True)
    _data_options(sp)
    sp.set_defaults(func=cmd_loglik)
    return parser


def main(argv: T.Optional[T.Sequence[str]] = None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    argv = list(argv)
    args = build_parser().parse_args(argv)

    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("twoway_factor").setLevel(logging.WARNING if args.quiet else logging.INFO)

    if args.threads is not None and args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_ERROR
    run = None
    try:
        run = _Run(args, argv)
        code = args.func(args, run)
    except (Error, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        code = EXIT_ERROR
        if run is None:
            return code
    try:
        return run.finish(code)
    except OSError as e:
        print(f"error: cannot write manifest: {e}", file=sys.stderr)
        return EXIT_ERROR
