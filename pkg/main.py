import argparse
import csv
import logging
import sys
import time
from dataclasses import replace
from typing import List, Optional

from config import LOG_LEVEL, SEED
from agent import AgentError
from harness import (
    SolveConfig, Status, TraceWriter, exactness_gap, fit_iteration_model, flow_residual,
    objective, run, sweep, total_loss, write_solution,
)
from kernel_check import run_bench, run_kernel_check
from kernels import KernelError
from network import (
    GENERATORS, LoadProfile, NetworkFormatError, NetworkValidationError,
    diameter, load_network, save_network,
)
from storage import write_text_atomic

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_MAX_ITERS = 2
EXIT_CHECK_FAILED = 3

log = logging.getLogger("ropf")


def setup_logger() -> logging.Logger:
    log = logging.getLogger("ropf")
    log.setLevel(getattr(logging, LOG_LEVEL, logging.INFO))
    h = logging.StreamHandler(sys.stdout)
    fmt = logging.Formatter("%(asctime)s | %(levelname)s | %(message)s", "%H:%M:%S")
    h.setFormatter(fmt)
    log.handlers[:] = [h]
    return log


def _csv_ints(text: str) -> List[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _solve_config(args) -> SolveConfig:
    """Environment defaults, overridden by whichever flags were given."""
    flags = {k: getattr(args, k) for k in ("rho", "tol_scale", "max_iters", "parallelism")}
    return replace(SolveConfig.from_config(), **{k: v for k, v in flags.items() if v is not None})


def _profile(args) -> LoadProfile:
    base = LoadProfile.from_config(seed=args.seed)
    return LoadProfile(
        seed=base.seed,
        pv_fraction=base.pv_fraction if args.pv_fraction is None else args.pv_fraction,
        flex=base.flex,
        objective=base.objective if args.objective is None else args.objective,
        root_v=base.root_v,
        window=base.window,
    )


# ---------- commands ----------

def cmd_solve(args) -> int:
    with open(args.network, "rb") as fh:
        net = load_network(fh.read())
    cfg = _solve_config(args)

    log.info("=" * 58)
    log.info(f"Solve: {args.network} ({net.n_buses} buses, diameter {diameter(net)})")
    log.info("=" * 58)

    t0 = time.perf_counter()
    with TraceWriter(args.trace) as writer:
        sol, trace = run(net, cfg, on_row=writer)
    elapsed = time.perf_counter() - t0
    write_solution(sol, args.out)

    gaps = exactness_gap(sol, net)
    t = trace.times
    log.info(f"Iterations: {sol.iterations} ({trace.status.value}) in {elapsed:.2f}s")
    log.info(f"Residuals: r={sol.r:.3e} s={sol.s:.3e}")
    log.info(f"Objective: {objective(sol, net):.9g} | line loss {total_loss(sol, net):.9g}")
    log.info(f"Exactness gap: max {max(gaps.values(), default=0.0):.3e} | flow residual {flow_residual(sol, net):.3e}")
    log.info(f"Phase time: x {t.x:.2f}s, z {t.z:.2f}s, mult {t.mult:.2f}s | "
             f"mean agent update {t.mean_agent_kernel * 1e6:.1f}us")
    log.info(f"Wrote {args.trace} and {args.out}")
    return EXIT_OK if trace.status is Status.CONVERGED else EXIT_MAX_ITERS


def cmd_generate(args) -> int:
    net = GENERATORS[args.topology](args.size, _profile(args))
    data = save_network(net)
    if args.out:
        write_text_atomic(args.out, data.decode("utf-8"))
        log.info(f"Generated {args.topology} n={args.size} seed={args.seed} "
                 f"(diameter {diameter(net)}) -> {args.out}")
    else:
        sys.stdout.write(data.decode("utf-8"))
    return EXIT_OK


def cmd_kernel_check(args) -> int:
    report = run_kernel_check(args.count, args.seed, repro_dir=args.repro_dir)
    for family, fam in report.families.items():
        log.info(f"{family}: max gap {fam.max_gap:.3e}, max violation {fam.max_violation:.3e}, "
                 f"failures {fam.failures}/{fam.count}")
        if fam.repro:
            log.error(f"{family}: failing instance saved to {fam.repro}")
    if report.ok:
        log.info("✅ All kernels within tolerance")
        return EXIT_OK
    return EXIT_CHECK_FAILED


def cmd_bench(args) -> int:
    stats = run_bench(args.count, args.seed)
    for family, st in stats.items():
        log.info(f"{family}: n={st.count} mean {st.mean_us:.1f}us | median {st.median_us:.1f}us | "
                 f"p99 {st.p99_us:.1f}us")
    return EXIT_OK


def cmd_sweep(args) -> int:
    topologies = [t.strip() for t in args.topologies.split(",") if t.strip()]
    rows = sweep(topologies, args.sizes, _profile(args), _solve_config(args))
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["topology", "n", "diameter", "iterations", "status", "seconds"])
        for row in rows:
            w.writerow([row.topology, row.n, row.diameter, row.iterations, row.status.value, f"{row.seconds:.3f}"])
    if len(rows) >= 2:
        a, b = fit_iteration_model(rows)
        log.info(f"Iteration model: iterations ~ {a:.3f} * N + {b:.3f} * D")
    log.info(f"Wrote {args.out}")
    return EXIT_OK if all(r.status is Status.CONVERGED for r in rows) else EXIT_MAX_ITERS


# ---------- argument parsing ----------

def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--rho", type=float, default=None, help="ADMM penalty parameter (ROPF_RHO)")
    p.add_argument("--tol-scale", type=float, default=None, help="stop when r, s <= tol_scale * sqrt(N) (ROPF_TOL_SCALE)")
    p.add_argument("--max-iters", type=int, default=None, help="iteration cap (ROPF_MAX_ITERS)")
    p.add_argument("--parallelism", type=int, default=None, help="worker threads (ROPF_PARALLELISM)")


def _add_profile_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=SEED)
    p.add_argument("--pv-fraction", type=float, default=None, help="share of buses with a PV inverter")
    p.add_argument("--objective", choices=("loss", "cost"), default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ropf", description="Distributed ADMM solver for relaxed OPF on radial networks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="run ADMM on a network document")
    p.add_argument("network")
    _add_solver_flags(p)
    p.add_argument("--out", default="solution.json")
    p.add_argument("--trace", default="trace.csv")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("generate", help="write a synthetic network document")
    p.add_argument("topology", choices=sorted(GENERATORS))
    p.add_argument("size", type=int)
    _add_profile_flags(p)
    p.add_argument("--out", default=None, help="output path (stdout when omitted)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("kernel-check", help="fuzz the kernels against the reference solvers")
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--seed", type=int, default=SEED)
    p.add_argument("--repro-dir", default=".")
    p.set_defaults(func=cmd_kernel_check)

    p = sub.add_parser("bench", help="per-call kernel latency")
    p.add_argument("--count", type=int, default=10000)
    p.add_argument("--seed", type=int, default=SEED)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="iterations versus size and diameter")
    p.add_argument("--topologies", default="line,fattree,random")
    p.add_argument("--sizes", type=_csv_ints, default=[5, 10, 20, 50])
    _add_solver_flags(p)
    _add_profile_flags(p)
    p.add_argument("--out", default="sweep.csv")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    setup_logger()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_ERROR

    try:
        return args.func(args)
    except NetworkValidationError as e:
        for problem in e.problems:
            log.error(f"invalid network: {problem}")
        log.debug("validation failure", exc_info=e)
    except (NetworkFormatError, ValueError) as e:
        log.error(f"{e}")
        log.debug("bad input", exc_info=e)
    except OSError as e:
        log.error(f"I/O error: {e}")
        log.debug("I/O failure", exc_info=e)
    except (KernelError, AgentError) as e:
        log.error(f"numerical failure: {e}")
        log.debug("solver failure", exc_info=e)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
