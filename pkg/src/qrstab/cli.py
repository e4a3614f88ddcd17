"""Command-line front end: ``qrstab {solve,stiffness,imex-bench,spectra,tableaux}``.

Every numeric CSV cell is written with ``%.12e``.  A run can be described by a
JSON file (``--config``) whose keys are the RunSpec field names; flags given on
the command line override file values.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import imex, spectral, stepper, tableaux
from .problems import OdeSystem, make_problem

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2

DEFAULT_T_END = {"2dlin": 50.0, "scalar": 1.0, "compost": 80.0, "vdp": 200.0, "fhn": 200.0}


class UsageError(Exception):
    pass


@dataclass
class RunSpec:
    problem: str = "scalar"
    params: dict = field(default_factory=dict)
    tab: str | None = None
    explicit_tab: str | None = None
    implicit_tab: str | None = None
    tol: float | None = None
    atol: float = 1e-6
    rtol: float = 1e-6
    t0: float = 0.0
    t_end: float | None = None
    fixed_h: float | None = None
    h0: float = 0.05
    h_max: float = 0.5
    jac: str = "analytic"
    w: int = 1
    window_time: float | None = None
    d1: float = -2.0
    d2: float = 2.0
    H0: float | None = None
    calibration: list | None = None
    threshold_mode: str = "divide"
    out: str | None = None
    seed: int | None = None
    quick: bool = False

    @classmethod
    def from_mapping(cls, data: dict) -> "RunSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise UsageError(f"unknown run-spec keys: {', '.join(unknown)}")
        return cls(**data)

    def merged(self, overrides: dict) -> "RunSpec":
        data = dataclasses.asdict(self)
        for k, v in overrides.items():
            if k == "params":
                data["params"] = {**data["params"], **v}
            else:
                data[k] = v
        return RunSpec.from_mapping(data)

    def end_time(self) -> float:
        t_end = self.t_end if self.t_end is not None else DEFAULT_T_END.get(self.problem, 1.0)
        if self.quick:
            t_end = self.t0 + (t_end - self.t0) / 10.0
        return t_end

    def stepper_config(self) -> stepper.StepperConfig:
        atol, rtol = (self.tol, self.tol) if self.tol is not None else (self.atol, self.rtol)
        h_max = max(self.h_max, self.fixed_h or 0.0)
        h0 = min(self.h0, h_max)
        return stepper.StepperConfig(
            atol=atol, rtol=rtol, h0=h0, h_max=h_max, jac_mode=self.jac, fixed_step=self.fixed_h
        )

    def system(self) -> OdeSystem:
        return make_problem(self.problem, **self.params)

    def imex_config(self) -> imex.ImexConfig | None:
        if self.explicit_tab is None and self.implicit_tab is None:
            return None
        if self.explicit_tab is None or self.implicit_tab is None:
            raise UsageError("give both --explicit-tab and --implicit-tab for switching runs")
        cal = None
        if self.H0 is None:
            if self.calibration is None:
                raise UsageError("switching runs need --H0 or --calibration START END ALPHA")
            cal = imex.Calibration(*map(float, self.calibration))
        return imex.ImexConfig(
            tableaux.builtin(self.explicit_tab),
            tableaux.builtin(self.implicit_tab),
            d1=self.d1,
            d2=self.d2,
            H0=self.H0,
            calibration=cal,
            w=self.w,
            stepper=self.stepper_config(),
            threshold_mode=self.threshold_mode,
            seed=self.seed,
        )


# -- output helpers -----------------------------------------------------------


def fmt(v) -> str:
    return "%.12e" % v


def write_csv(path: str | None, header: Sequence[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(c if isinstance(c, str) else fmt(c) for c in row))
    text = "\n".join(lines) + "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def trajectory_rows(traj: stepper.Trajectory):
    # row n carries the step that arrived at t_n
    d = traj.states.shape[1]
    header = ["t"] + [f"x_{i}" for i in range(d)] + ["h", "scheme"]
    rows = [[traj.times[0], *traj.states[0], math.nan, "-"]]
    for n in range(1, len(traj)):
        rows.append([traj.times[n], *traj.states[n], traj.step_sizes[n - 1], traj.method_used[n - 1]])
    return header, rows


def trace_table(trace: spectral.SpectralTrace, w: int, lognorm=None, scheme=None):
    """Rows of the trace schema ``t, h, sigma1, sigmad, SI_w, lognorm`` (+ ``scheme``)."""
    t, h, s1, sd = trace.arrays()
    si = spectral.si_series(trace, w)
    ln = np.full(len(t), math.nan) if lognorm is None else np.asarray(lognorm, dtype=float)
    header = ["t", "h", "sigma1", "sigmad", "SI_w", "lognorm"]
    rows = [[t[n], h[n], s1[n], sd[n], si[n], ln[n]] for n in range(len(t))]
    if scheme is not None:
        header.append("scheme")
        for row, s in zip(rows, scheme):
            row.append(s)
    return header, rows


# -- commands -----------------------------------------------------------------


def _run(spec: RunSpec, sys_: OdeSystem):
    cfg = spec.imex_config()
    t_end = spec.end_time()
    if cfg is not None:
        traj, stats, trace = imex.imex_integrate(sys_, cfg, spec.t0, sys_.x0, t_end)
        return traj, stats, trace
    if spec.tab is None:
        raise UsageError("give --tab, or --explicit-tab with --implicit-tab")
    traj, stats = stepper.integrate(sys_, tableaux.builtin(spec.tab), spec.stepper_config(), spec.t0, sys_.x0, t_end)
    return traj, stats, None


def cmd_solve(spec: RunSpec) -> int:
    sys_ = spec.system()
    traj, stats, _ = _run(spec, sys_)
    header, rows = trajectory_rows(traj)
    write_csv(spec.out, header, rows)
    print(json.dumps(stats.as_dict()), file=sys.stderr)
    return EXIT_OK


PLOT_SCRIPT = """# gnuplot script; run with: gnuplot {script}
set datafile separator ','
set terminal pngcairo size 900,900
set output '{png}'
set multiplot layout 3,1
set logscale y
plot '{csv}' using 1:{c_si} with lines title '|SI(n,w)|', '' using 1:{c_ln} with lines title '|sigma[A]|'
unset logscale y
plot '{csv}' using 1:{c_x} with lines title 'x_0'
set logscale y
plot '{csv}' using 1:2 with lines title 'h'
unset multiplot
"""


def render_stiffness_png(path: Path, t, abs_si, abs_ln, x0, h) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(3, 1, sharex=True, figsize=(7, 8))
    axes[0].semilogy(t, abs_si, lw=0.8, label="|SI(n,w)|")
    axes[0].semilogy(t, abs_ln, lw=0.8, label=r"$|\sigma[A(t_n)]|$")
    axes[0].legend(loc="best", fontsize=8)
    axes[1].plot(t, x0, lw=0.8)
    axes[1].set_ylabel("x_0")
    axes[2].semilogy(t, h, lw=0.8)
    axes[2].set_ylabel("h")
    axes[2].set_xlabel("t")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def stiffness_series(spec: RunSpec, sys_: OdeSystem):
    traj, stats, trace = _run(spec, sys_)
    if trace is None:
        trace = spectral.trace_trajectory(sys_, traj.times, traj.states, spec.seed)
    lognorm = np.array([spectral.sigma_lognorm(sys_.jac(t, x)) for t, x in zip(traj.times[:-1], traj.states[:-1])])
    return traj, stats, trace, lognorm


def cmd_stiffness(spec: RunSpec) -> int:
    sys_ = spec.system()
    traj, stats, trace, lognorm = stiffness_series(spec, sys_)
    switching = spec.imex_config() is not None
    header, rows = trace_table(trace, spec.w, lognorm, traj.method_used if switching else None)
    header += ["abs_SI_w", "abs_lognorm", "x_0"]
    for n, row in enumerate(rows):
        row += [abs(row[4]), abs(row[5]), traj.states[n, 0]]
    if spec.out is None:
        write_csv(None, header, rows)
        return EXIT_OK
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    csv = out / "stiffness.csv"
    write_csv(str(csv), header, rows)
    k = len(header) - 3
    script = PLOT_SCRIPT.format(
        script="stiffness.gp", png="stiffness_gnuplot.png", csv=csv.name, c_si=k + 1, c_ln=k + 2, c_x=k + 3
    )
    (out / "stiffness.gp").write_text(script)
    arr = np.array([[r[0], r[1], r[k], r[k + 1], r[k + 2]] for r in rows])
    render_stiffness_png(out / "stiffness.png", arr[:, 0], arr[:, 2], arr[:, 3], arr[:, 4], arr[:, 1])
    print(json.dumps(stats.as_dict()), file=sys.stderr)
    return EXIT_OK


# -- benchmark tables ---------------------------------------------------------

BENCH_TOLS = {"compost": (1e-4, 1e-5, 1e-6), "fhn": (1e-4, 1e-6, 1e-8, 1e-10)}
BENCH_COLUMNS = ["M", "TOL", "H0", "h_mean", "nexp", "nimp", "Feval", "Jaceval", "Lsol"]


@dataclass(frozen=True)
class BenchCell:
    label: str
    table: str
    tol: float
    params: tuple
    explicit: str | None
    implicit: str | None
    quick: bool


def _bench_setup(table: str, params: dict):
    if table == "compost":
        nu = float(params.get("nu", 0.09))
        interval = (2.0, 20.0) if nu < 0.2 else (2.0, 5.0)
        return dict(t_end=80.0, jac="fd", d1=-2.0, d2=2.0, alpha=0.1, interval=interval)
    return dict(t_end=200.0, jac="analytic", d1=-3.5, d2=10.0, alpha=0.5, interval=(2.0, 20.0))


def bench_cells(table: str, tols, params: dict, quick: bool = False) -> list[BenchCell]:
    p = tuple(sorted(params.items()))
    cells = []
    for tol in tols:
        if table == "compost":
            cells += [
                BenchCell("Mcpb1", table, tol, p, "HEU-2-2-1", None, quick),
                BenchCell("Mcpb2", table, tol, p, None, "SDIRK-2-2-1", quick),
                BenchCell("Mcpb3", table, tol, p, "HEU-2-2-1", "SDIRK-2-2-1", quick),
            ]
        elif table == "fhn":
            cells += [
                BenchCell("Mfhn1", table, tol, p, "BS-4-2-3", None, quick),
                BenchCell("Mfhn2", table, tol, p, "BS-4-2-3", "ESDIRK-4-2-3", quick),
                BenchCell("Mfhn3", table, tol, p, "BS-4-2-3", "SDIRK-4-2-3", quick),
                BenchCell("Mfhn4", table, tol, p, "BS-4-2-3", "SDIRK-3-2-3", quick),
            ]
        else:
            raise UsageError(f"unknown bench table {table!r}; choose compost or fhn")
    return cells


def run_bench_cell(cell: BenchCell) -> dict:
    """One (method, tol) cell; H0 is always calibrated with the explicit method of the table."""
    setup = _bench_setup(cell.table, dict(cell.params))
    sys_ = make_problem(cell.table, **dict(cell.params))
    t_end = setup["t_end"] / (10.0 if cell.quick else 1.0)
    scfg = stepper.StepperConfig.with_tol(cell.tol, h0=0.05, h_max=0.5, jac_mode=setup["jac"])
    expl_name = "HEU-2-2-1" if cell.table == "compost" else "BS-4-2-3"
    # explicit-only cells still need a same-order partner to build the config
    impl_name = cell.implicit or ("SDIRK-2-2-1" if cell.table == "compost" else "ESDIRK-4-2-3")
    cfg = imex.ImexConfig(
        tableaux.builtin(expl_name),
        tableaux.builtin(impl_name),
        d1=setup["d1"],
        d2=setup["d2"],
        calibration=imex.Calibration(*setup["interval"], setup["alpha"]),
        stepper=scfg,
    )
    H0 = imex.calibrate_H0(sys_, cfg)
    row = dict(M=cell.label, TOL=cell.tol, H0=H0)
    if cell.implicit is None:
        _, st = stepper.integrate(sys_, tableaux.builtin(cell.explicit), scfg, 0.0, sys_.x0, t_end)
        row.update(h_mean=st.h_mean, nexp=st.nexp, nimp="NA", Feval=st.feval, Jaceval="NA", Lsol="NA")
    elif cell.explicit is None:
        _, st = stepper.integrate(sys_, tableaux.builtin(cell.implicit), scfg, 0.0, sys_.x0, t_end)
        row.update(h_mean=st.h_mean, nexp="NA", nimp=st.nimp, Feval=st.feval, Jaceval=st.jaceval, Lsol=st.lsol)
    else:
        _, st, _ = imex.imex_integrate(sys_, cfg, 0.0, sys_.x0, t_end, H0=H0)
        row.update(h_mean=st.h_mean, nexp=st.nexp, nimp=st.nimp, Feval=st.feval, Jaceval=st.jaceval, Lsol=st.lsol)
    return row


def _bench_cell_text(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(v)
    return fmt(v)


def bench_threads() -> int:
    raw = os.environ.get("QRSTAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"QRSTAB_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def cmd_imex_bench(table: str, tols, params: dict, out: str | None, quick: bool = False) -> int:
    cells = bench_cells(table, tols, params, quick)
    stream = sys.stdout if out in (None, "-") else open(out, "w")
    try:
        stream.write(",".join(BENCH_COLUMNS) + "\n")
        stream.flush()
        workers = bench_threads()
        if workers == 1:
            results = map(run_bench_cell, cells)
            pool = None
        else:
            pool = concurrent.futures.ProcessPoolExecutor(max_workers=workers)
            results = pool.map(run_bench_cell, cells)
        try:
            # map yields in submission order, so rows stay deterministic
            for row in results:
                stream.write(",".join(_bench_cell_text(row[c]) for c in BENCH_COLUMNS) + "\n")
                stream.flush()
        finally:
            if pool is not None:
                pool.shutdown(cancel_futures=True)
    finally:
        if stream is not sys.stdout:
            stream.close()
    return EXIT_OK


# -- spectra ------------------------------------------------------------------


def spectra_log(spec: RunSpec, sys_: OdeSystem) -> spectral.QrDiagonalLog:
    t_end = spec.end_time()
    if sys_.amat is not None:
        if spec.fixed_h is None:
            raise UsageError("spectra on a linear problem needs --fixed-h")
        if spec.tab is None:
            raise UsageError("spectra needs --tab")
        n = int(round((t_end - spec.t0) / spec.fixed_h))
        times = spec.t0 + spec.fixed_h * np.arange(n + 1)
        phis = spectral.linear_propagators(sys_, tableaux.builtin(spec.tab), times)
        return spectral.discrete_qr_run(phis, np.eye(sys_.dim), times)
    traj, _, _ = _run(spec, sys_)
    phis = (
        spectral.variational_propagator(sys_, traj.times[n], traj.states[n], traj.states[n + 1], traj.step_sizes[n])
        for n in range(len(traj) - 1)
    )
    return spectral.discrete_qr_run(phis, np.eye(sys_.dim), traj.times)


def cmd_spectra(spec: RunSpec) -> int:
    sys_ = spec.system()
    log = spectra_log(spec, sys_)
    est = spectral.lyapunov_estimates(log)
    report = {"lyapunov_tail_min": est.tail_min.tolist(), "lyapunov_tail_max": est.tail_max.tolist()}
    if spec.window_time is not None:
        ss = spectral.sackersell_estimates(log, spec.window_time)
        report |= {"window_time": ss.window_time, "sackersell_alpha": ss.alpha.tolist(), "sackersell_beta": ss.beta.tolist()}
    for i in range(sys_.dim):
        line = f"i={i}  lyapunov [{est.tail_min[i]:.6e}, {est.tail_max[i]:.6e}]"
        if spec.window_time is not None:
            line += f"  sacker-sell(H={spec.window_time:g}) [{report['sackersell_alpha'][i]:.6e}, {report['sackersell_beta'][i]:.6e}]"
        print(line, file=sys.stderr)
    header = ["t"] + [f"s_{i}" for i in range(sys_.dim)]
    write_csv(spec.out, header, [[t, *s] for t, s in zip(est.times, est.series)])
    if spec.out not in (None, "-"):
        Path(spec.out).with_suffix(".json").write_text(json.dumps(report, indent=2) + "\n")
    return EXIT_OK


def cmd_tableaux_dump(names: Sequence[str], out: str | None) -> int:
    chosen = names or tableaux.BUILTIN_NAMES
    text = "".join(f"# {tableaux.builtin(n).name}\n{tableaux.dump_csv(tableaux.builtin(n))}" for n in chosen)
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _param(text: str) -> tuple[str, float | str]:
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        return key, float(value)
    except ValueError:
        return key, value


def _add_runspec_flags(p: argparse.ArgumentParser) -> None:
    # defaults are None so only flags actually given override the JSON file
    S = argparse.SUPPRESS
    p.add_argument("--config", help="JSON run spec")
    p.add_argument("--problem", default=S, choices=sorted(DEFAULT_T_END))
    p.add_argument("--param", action="append", type=_param, default=S, metavar="KEY=VALUE")
    p.add_argument("--tab", default=S)
    p.add_argument("--explicit-tab", default=S)
    p.add_argument("--implicit-tab", default=S)
    p.add_argument("--tol", type=float, default=S)
    p.add_argument("--atol", type=float, default=S)
    p.add_argument("--rtol", type=float, default=S)
    p.add_argument("--t0", type=float, default=S)
    p.add_argument("--tend", dest="t_end", type=float, default=S)
    p.add_argument("--fixed-h", type=float, default=S)
    p.add_argument("--h0", type=float, default=S)
    p.add_argument("--h-max", type=float, default=S)
    p.add_argument("--jac", choices=["analytic", "fd"], default=S)
    p.add_argument("--w", type=int, default=S)
    p.add_argument("--window-time", type=float, default=S)
    p.add_argument("--d1", type=float, default=S)
    p.add_argument("--d2", type=float, default=S)
    p.add_argument("--H0", type=float, default=S)
    p.add_argument("--calibration", type=float, nargs=3, metavar=("START", "END", "ALPHA"), default=S)
    p.add_argument("--threshold-mode", choices=list(imex.THRESHOLD_MODES), default=S)
    p.add_argument("--out", default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--quick", action="store_true", default=S)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qrstab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("solve", "stiffness", "spectra"):
        _add_runspec_flags(sub.add_parser(name))
    bench = sub.add_parser("imex-bench")
    bench.add_argument("table", choices=["compost", "fhn"])
    bench.add_argument("--tol", type=float, nargs="+")
    bench.add_argument("--param", action="append", type=_param, default=[], metavar="KEY=VALUE")
    bench.add_argument("--out")
    bench.add_argument("--quick", action="store_true")
    tabs = sub.add_parser("tableaux")
    tabs_sub = tabs.add_subparsers(dest="action", required=True, parser_class=_Parser)
    dump = tabs_sub.add_parser("dump")
    dump.add_argument("names", nargs="*")
    dump.add_argument("--out")
    return parser


def runspec_from_args(ns: argparse.Namespace) -> RunSpec:
    spec = RunSpec()
    if ns.config:
        try:
            data = json.loads(Path(ns.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {ns.config}: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError("config must be a JSON object")
        spec = RunSpec.from_mapping(data)
    overrides = {k: v for k, v in vars(ns).items() if k not in ("command", "config")}
    if "param" in overrides:
        overrides["params"] = dict(overrides.pop("param"))
    return spec.merged(overrides)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        if ns.command == "tableaux":
            return cmd_tableaux_dump(ns.names, ns.out)
        if ns.command == "imex-bench":
            tols = ns.tol or BENCH_TOLS[ns.table]
            return cmd_imex_bench(ns.table, tols, dict(ns.param), ns.out, ns.quick)
        spec = runspec_from_args(ns)
        return {"solve": cmd_solve, "stiffness": cmd_stiffness, "spectra": cmd_spectra}[ns.command](spec)
    except (UsageError, tableaux.UnknownMethodError) as exc:
        print(f"qrstab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, TypeError) as exc:
        print(f"qrstab: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ArithmeticError as exc:
        print(f"qrstab: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
