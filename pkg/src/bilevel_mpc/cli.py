"""Command-line front end.

Subcommands
-----------
toy       solve every formulation on one initial state and check their agreement
ordering  blocked values, oracle values and gap bounds for a family of blockings
simulate  closed-loop traces of the chosen controllers
certify   gap certificate for a pair of blockings or for the hierarchical scheme

Exit codes: 0 success, 1 failed check or verification, 2 certificate refused,
3 infeasible problem, 4 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .blocking import (
    BlockingMatrix,
    construct_from_p0,
    leading_free,
    numerical_rank,
    one_block,
    sample_initial_states,
)
from .certificates import (
    GapCertificate,
    blocked_gap_certificate,
    certificate_from_solution,
    delta_bound,
    hmpc_gap_certificate,
    reduced_program,
)
from .config import ProblemConfig, load_config, toy_config
from .errors import AssumptionViolation, ConfigError, EnumerationCapExceeded, InfeasibleProblem
from .formulations import (
    solve_lower,
    solve_p0,
    solve_p0_cascade,
    solve_p1_oracle,
    solve_p2,
    solve_p3,
    theta_star_map,
)
from .qp import QpTolerances, default_tolerances
from .simulate import CENTRALIZED, HMPC, KINDS, REDUCED, ControllerSpec, simulate, trace_metrics

EXIT_OK, EXIT_CHECK, EXIT_REFUSED, EXIT_INFEASIBLE, EXIT_CONFIG = 0, 1, 2, 3, 4
VERIFY_TOL = 1e-9


class CheckFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors; argparse's own code 2 means "refused" here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    return out


def _seed() -> int:
    raw = os.environ.get("BMPC_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"BMPC_SEED must be an integer, got {raw!r}") from None


def _load(args) -> ProblemConfig:
    cfg = load_config(args.config) if args.config else toy_config()
    if getattr(args, "horizon", None):
        cfg = cfg.with_horizon(args.horizon)
    tol = dict(cfg.tolerances)
    for key in ("rank", "gamma", "algorithm1", "settling"):
        v = getattr(args, f"tol_{key}", None)
        if v is not None:
            tol[key] = v
    if args.oracle_cap is not None:
        tol["oracle_cap"] = args.oracle_cap
    cfg.tolerances = tol
    if getattr(args, "x0", None) is not None:
        if len(args.x0) != cfg.n:
            raise ConfigError(f"--x0 has {len(args.x0)} entries, expected {cfg.n}")
        cfg.x0 = np.asarray(args.x0, dtype=float)
    if cfg.x0 is None:
        raise ConfigError("no initial state: set x0 in the config or pass --x0")
    return cfg


def _qp_tols(args):
    given = {k: getattr(args, f"tol_{k}") for k in ("kkt", "feas", "active")}
    if all(v is None for v in given.values()):
        return nullcontext()
    base = QpTolerances()
    return default_tolerances(QpTolerances(**{k: (v if v is not None else getattr(base, k)) for k, v in given.items()}))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2))


def _vec(v) -> list:
    return [float(x) for x in np.asarray(v).reshape(-1)]


def _close(a, b, tol=VERIFY_TOL) -> bool:
    return abs(a - b) <= tol * (1.0 + abs(b))


def parse_blocking(text: str, inst, cfg: ProblemConfig | None = None):
    """Blocking matrix from ``full``, ``one``, ``leading:K``, ``alg1`` or a JSON file path."""
    N, m = inst.model.N, inst.model.m
    if text == "full":
        return BlockingMatrix(np.eye(N * m))
    if text == "one":
        return one_block(N, m)
    if text.startswith("leading:"):
        try:
            return leading_free(int(text.split(":", 1)[1]), N, m)
        except ValueError as exc:
            raise ConfigError(f"blocking {text!r}: {exc}") from None
    if text == "alg1":
        return _algorithm1(inst, cfg)[0]
    path = Path(text)
    if not path.exists():
        raise ConfigError(f"blocking {text!r} is neither a known name nor an existing file")
    try:
        M = BlockingMatrix.from_dict(json.loads(path.read_text()))
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"blocking file {text}: {exc}") from None
    if M.rows != N * m:
        raise ConfigError(f"blocking file {text}: has {M.rows} rows, expected N*m = {N * m}")
    return M


def _algorithm1(inst, cfg):
    tol = cfg.tolerances if cfg is not None else {}
    count = int(tol.get("samples") or 50)
    width = float(tol.get("sample_half_width") or 0.2)
    samples = sample_initial_states(cfg.x0, width, count, seed=_seed())
    M = construct_from_p0(inst, samples, tol=tol.get("algorithm1") or 1e-8)
    return M, samples


# ---------------------------------------------------------------------------


def cmd_toy(args) -> int:
    cfg = _load(args)
    inst = cfg.build()
    x0 = cfg.x0
    out = _out_dir(args)
    cap = cfg.tolerances["oracle_cap"]
    theta, _ = solve_p0(inst)
    reps = {
        "P0": solve_p0_cascade(inst, x0),
        "P2": solve_p2(inst, x0),
        "P1": solve_p1_oracle(inst, x0, cap=cap),
        "P3": solve_p3(inst, x0),
    }
    report = {"x0": _vec(x0), "theta_star": _vec(theta), "formulations": {}}
    for name, rep in reps.items():
        X = inst.plant.rollout(x0, rep.U)
        report["formulations"][name] = {
            "U": _vec(rep.U), "Theta": None if rep.Theta is None else _vec(rep.Theta),
            "X": [_vec(x0)] + [_vec(x) for x in X], "value": rep.value, "wall_time": rep.wall_time,
        }
    V1, V2, V3 = reps["P1"].value, reps["P2"].value, reps["P3"].value
    lower_U = solve_lower(inst, reps["P2"].Theta, x0).U
    checks = {
        "V1_equals_V2": abs(V1 - V2) <= 1e-6 * (1 + abs(V2)),
        "V2_equals_V3": abs(V2 - V3) <= 1e-6 * (1 + abs(V2)),
        "U_P2_equals_U_P3": float(np.max(np.abs(reps["P2"].U - reps["P3"].U))) <= 1e-6,
        "cascade_reproduces_P2": float(np.max(np.abs(lower_U - reps["P2"].U))) <= 1e-6,
        "P2_faster_than_oracle": reps["P2"].wall_time < reps["P1"].wall_time,
    }
    report["checks"] = checks
    report["diffs"] = {"V1-V2": V1 - V2, "V2-V3": V2 - V3,
                       "max|U_P2-U_P3|": float(np.max(np.abs(reps["P2"].U - reps["P3"].U)))}
    _dump(out / "toy_report.json", report)
    with open(out / "toy_trajectories.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        names = list(reps)
        w.writerow(["k"] + [f"u_{n}" for n in names] + [f"x{i}_{n}" for n in names for i in range(cfg.n)])
        Xs = {n: np.vstack([x0, inst.plant.rollout(x0, reps[n].U)]) for n in names}
        m = cfg.m
        for k in range(inst.model.N + 1):
            row = [k]
            for n in names:
                row.append(repr(float(reps[n].U[k * m])) if k < inst.model.N else "")
            for n in names:
                row.extend(repr(float(v)) for v in Xs[n][k])
            w.writerow(row)
    for name, rep in reps.items():
        print(f"{name}: value {rep.value:.12g}  time {rep.wall_time * 1e3:.2f} ms")
    print(f"theta* = {_vec(theta)}")
    if args.verify:
        for name, rep in reps.items():
            if not _close(inst.fu.stagewise_value(rep.U, x0), report["formulations"][name]["value"]):
                raise CheckFailed(f"verify: value of {name} does not match its input sequence")
    failed = [k for k, ok in checks.items() if not ok]
    for k, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'} {k}")
    if failed:
        raise CheckFailed(f"failed checks: {failed}; diffs {report['diffs']}")
    return EXIT_OK


def _cert_cols(certs: list[GapCertificate]):
    return [None if not c.issued else c.delta for c in certs]


def cmd_ordering(args) -> int:
    cfg = _load(args)
    inst = cfg.build()
    x0 = cfg.x0
    out = _out_dir(args)
    N, m = inst.model.N, inst.model.m
    i_list = args.i_list or list(range(1, N + 1))
    eps_list = args.eps if args.eps is not None else [0.0, 0.1, 0.5, 1.0]
    cap = cfg.tolerances["oracle_cap"]
    full = np.eye(N * m)
    p2 = solve_p2(inst, x0)
    V2 = p2.value
    rows, raw = [], []

    def add(name, i, rank, rep, certs, status="ok", w=None, Mhat=None):
        rows.append({
            "formulation": name, "i": i, "rank": rank,
            "value": None if rep is None else rep.value,
            "gap": None if rep is None else rep.value - V2,
            "delta": None if not certs else (certs[0].delta if certs[0].issued else None),
            **{f"delta_eps_{e:g}": v for e, v in zip(eps_list, _cert_cols(certs) if certs else [None] * len(eps_list))},
            "status": status,
            "wall_time": None if rep is None else rep.wall_time,
        })
        raw.append({"formulation": name, "i": i, "U": None if rep is None else _vec(rep.U),
                    "w": None if w is None else _vec(w), "Mhat": Mhat})

    for i in i_list:
        M = leading_free(i, N, m)
        rep = solve_p2(inst, x0, M)
        T = np.linalg.pinv(full) @ M.M
        w = T @ rep.Phi
        certs = [certificate_from_solution(inst, M.M, full, x0, rep.Phi, e) for e in eps_list]
        add(f"P2(M_{i})", i, M.p, rep, certs, w=w, Mhat="full")
        try:
            rep1 = solve_p1_oracle(inst, x0, M, cap=cap)
            add(f"P1(M_{i})", i, M.p, rep1, [])
        except EnumerationCapExceeded as exc:
            add(f"P1(M_{i})", i, M.p, None, [], status=f"skipped: {exc}")
    p0 = solve_p0_cascade(inst, x0)
    hcerts = [hmpc_gap_certificate(inst, x0, e) for e in eps_list]
    status = "ok" if hcerts[0].issued else f"certificate refused: {hcerts[0].reason}"
    w0 = None
    if hcerts[0].issued:
        w0 = theta_star_map(inst, p0.U, x0)
    add("P0", None, m, p0, hcerts, status=status, w=w0, Mhat="full")
    add("P2", None, N * m, p2, [])
    Mstar, samples = _algorithm1(inst, cfg)
    rep = solve_p2(inst, x0, Mstar)
    certs = [certificate_from_solution(inst, Mstar.M, full, x0, rep.Phi, e) for e in eps_list]
    add("P2(M*)", None, Mstar.p, rep, certs, w=Mstar.M @ rep.Phi, Mhat="full")

    fields = list(rows[0])
    with open(out / "ordering.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=fields)
        wr.writeheader()
        for r in rows:
            wr.writerow({k: ("" if v is None else (repr(float(v)) if isinstance(v, float) else v)) for k, v in r.items()})
    _dump(out / "ordering_solutions.json", {"x0": _vec(x0), "eps": eps_list, "rows": rows, "raw": raw,
                                            "algorithm1": {"rank": Mstar.p, "blocking": Mstar.to_dict(),
                                                           "samples": [_vec(s) for s in samples]}})
    for r in rows:
        d = "" if r["delta"] is None else f"  delta {r['delta']:.6g}"
        v = "" if r["value"] is None else f"{r['value']:.10g}"
        print(f"{r['formulation']:>10} rank {r['rank']:>3}  value {v}{d}  {r['status'] if r['status'] != 'ok' else ''}")
    if args.verify:
        _verify_ordering(inst, x0, rows, raw, eps_list, V2)
        print("verify: all table values recomputed")
    return EXIT_OK


def _verify_ordering(inst, x0, rows, raw, eps_list, V2):
    prog = reduced_program(inst, None, x0)
    for r, s in zip(rows, raw):
        if s["U"] is None:
            continue
        U = np.asarray(s["U"])
        v = inst.fu.stagewise_value(U, x0)
        if not _close(v, r["value"]) or not _close(v - V2, r["gap"]):
            raise CheckFailed(f"verify: {r['formulation']} value {r['value']!r} != recomputed {v!r}")
        if s["w"] is not None and r["delta"] is not None:
            w = np.asarray(s["w"])
            if float(np.max(np.abs(prog.U(w) - U))) > 1e-7 * (1 + float(np.max(np.abs(U)))):
                raise CheckFailed(f"verify: {r['formulation']} reduced point does not reproduce U")
            for e in eps_list:
                key = f"delta_eps_{e:g}"
                if r[key] is None:
                    continue
                d = delta_bound(prog, w, e).delta
                if not _close(d, r[key]):
                    raise CheckFailed(f"verify: {r['formulation']} {key} {r[key]!r} != recomputed {d!r}")


def cmd_simulate(args) -> int:
    cfg = _load(args)
    inst = cfg.build()
    out = _out_dir(args)
    kinds = args.controllers or [HMPC, REDUCED, CENTRALIZED]
    for k in kinds:
        if k not in KINDS:
            raise ConfigError(f"unknown controller {k!r}; choose from {', '.join(KINDS)}")
    blocking = parse_blocking(args.blocking, inst, cfg) if args.blocking else None
    traces, summary = {}, {"x0": _vec(cfg.x0), "steps": args.steps, "controllers": {}}
    for k in kinds:
        spec = ControllerSpec(k, inst, blocking if k in (REDUCED, "oracle_bilevel_cascade") else None,
                              oracle_cap=cfg.tolerances["oracle_cap"])
        tr = simulate(spec, cfg.x0, args.steps)
        traces[k] = tr
        tr.to_csv(out / f"trace_{k}.csv")
        summary["controllers"][k] = trace_metrics(tr, cfg.tolerances["settling"])
    if CENTRALIZED in traces:
        ref = traces[CENTRALIZED]
        dev = {}
        for k, tr in traces.items():
            if k == CENTRALIZED:
                continue
            n = min(tr.steps, ref.steps)
            dev[k] = float(np.max(np.abs(tr.inputs[:n] - ref.inputs[:n]), initial=0.0))
        summary["max_input_deviation_from_centralized"] = dev
    _dump(out / "summary.json", summary)
    for k, s in summary["controllers"].items():
        avg = s["average_stage_cost"]
        print(f"{k:>26}: steps {s['steps']}  avg stage cost {avg if avg is None else format(avg, '.8g')}  "
              f"settling {s['settling_step']}  {s['failure']}")
    for k, d in summary.get("max_input_deviation_from_centralized", {}).items():
        print(f"max |u_{k} - u_centralized| = {d:.3e}")
    if args.verify:
        A, B = inst.plant.A, inst.plant.B
        for k, tr in traces.items():
            for j in range(tr.steps):
                if np.any(tr.states[j + 1] != A @ tr.states[j] + B @ tr.inputs[j]):
                    raise CheckFailed(f"verify: {k} state {j + 1} does not follow the model")
                c = inst.fu.stage_cost(tr.states[j], tr.inputs[j])
                if not _close(c, tr.stage_costs[j]):
                    raise CheckFailed(f"verify: {k} stage cost at step {j} does not match")
        print("verify: traces recomputed")
    return EXIT_OK


def cmd_certify(args) -> int:
    cfg = _load(args)
    inst = cfg.build()
    x0 = cfg.x0
    out = _out_dir(args)
    eps_list = args.eps if args.eps is not None else [0.0]
    if args.M == "hmpc":
        certs = [hmpc_gap_certificate(inst, x0, e) for e in eps_list]
    else:
        M = parse_blocking(args.M, inst, cfg)
        Mhat = parse_blocking(args.Mhat, inst, cfg)
        certs = [blocked_gap_certificate(inst, M, Mhat, x0, e) for e in eps_list]
    records = [c.to_dict() for c in certs]
    _dump(out / "certificate.json", {"x0": _vec(x0), "M": args.M, "Mhat": args.Mhat, "certificates": records})
    for c in certs:
        if c.issued:
            print(f"eps {c.epsilon:g}: {c.certified_pair[0]} - {c.certified_pair[1]} <= {c.delta:.10g}")
        else:
            print(f"eps {c.epsilon:g}: refused ({c.reason})")
            for v in c.violations:
                print(f"  upper row {v['row']} (stage {v['stage']}, constraint {v['constraint']}) = {v['value']:.3e}")
    if args.verify and args.M != "hmpc":
        for c in certs:
            if c.issued and not (c.delta >= 0 and np.isfinite(c.delta)):
                raise CheckFailed("verify: certificate bound is not a finite nonnegative number")
    return EXIT_OK if all(c.issued for c in certs) else EXIT_REFUSED


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="problem config JSON (default: bundled toy)")
    common.add_argument("--out", default="bmpc_out", help="output directory")
    common.add_argument("--x0", type=_float_list, help="initial state override, comma separated (use --x0=-1,0 for negative values)")
    common.add_argument("--oracle-cap", type=int, help="max lower rows for the exact bilevel oracle")
    common.add_argument("--verify", action="store_true", help="recompute every emitted value from raw solutions")
    for key in ("kkt", "feas", "active", "rank", "gamma", "algorithm1", "settling"):
        common.add_argument(f"--tol-{key}", type=float, help=f"override the {key} tolerance")

    parser = _Parser(prog="bilevel-mpc", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy", parents=[common], help="all formulations at one state")
    p.add_argument("--horizon", type=int, help="override N")
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("ordering", parents=[common], help="blocking family table with gap bounds")
    p.add_argument("--i-list", type=_int_list, help="leading-free counts, e.g. 1-10 or 1,3,5")
    p.add_argument("--eps", type=_float_list, help="epsilon values for the tightened bound")
    p.add_argument("--horizon", type=int, help="override N")
    p.set_defaults(func=cmd_ordering)

    p = sub.add_parser("simulate", parents=[common], help="closed-loop traces")
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--controllers", type=lambda s: [t.strip() for t in s.split(",") if t.strip()],
                   help=f"comma separated subset of {', '.join(KINDS)}")
    p.add_argument("--blocking", help="blocking for the bilevel cascades (full, one, leading:K, alg1, or file)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("certify", parents=[common], help="gap certificate")
    p.add_argument("--M", required=True, help="blocking to certify (full, one, leading:K, alg1, file) or 'hmpc'")
    p.add_argument("--Mhat", default="full", help="reference blocking (default full)")
    p.add_argument("--eps", type=_float_list, help="active-set thresholds, comma separated (default 0)")
    p.set_defaults(func=cmd_certify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "steps", 0) is not None and getattr(args, "steps", 0) < 0:
        parser.error("--steps must be nonnegative")
    try:
        with _qp_tols(args):
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AssumptionViolation as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleProblem as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except EnumerationCapExceeded as exc:
        print(f"oracle refused: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
