"""Command-line front end: ``cvarlq riccati | sweep | verify``.

Every subcommand reads one JSON config document (defaults reproduce the
scalar benchmark), lets flags override individual fields, and exits with
0 ok, 1 config error, 2 infeasible recursion, 3 bound-verification
failure, 4 unsupported dimension.
"""

from __future__ import annotations

import argparse
import copy
import datetime
import json
import os
import sys
import tempfile

import numpy as np

from . import __version__, dp, mc
from .errors import (
    BadAlpha,
    ConditioningError,
    InvalidProblem,
    NoFeasibleGamma,
    NotInAmbiguitySet,
    NotPositiveDefinite,
    RNotIdentity,
    Unsupported,
)
from .model import LqProblem, fig1_problem
from .riccati import acvar_recursion, leqr_recursion, lq_game_recursion, lqr_recursion
from .rng import SeedSchedule

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_BOUND, EXIT_UNSUPPORTED = 0, 1, 2, 3, 4

DEFAULT_CONFIG = {
    "problem": fig1_problem().to_dict(),
    "x0": [1.0],
    "trials": 50_000,
    "master_seed": 20240607,
    "acvar_Ls": [float(v) for v in np.geomspace(0.2, 100.0, 10)],
    "leqr_gammas": None,
    "exact_alphas": [0.05, 0.3, 1.0],
    "alphas": [0.05],
    "output_dir": "cvarlq_out",
    "grid": {"x_max": 6.0, "s_min": -5.0, "s_max": 40.0, "nx": 241, "ns": 181, "nu": 101},
    "verify": {
        "support": [-2.0, -1.0, 0.0, 1.0, 2.0],
        "Ls": [0.2, 1.0, 10.0],
        "trials": 50_000,
        "grid": {"x_max": 6.0, "s_min": -5.0, "s_max": 40.0, "nx": 121, "ns": 121, "nu": 101},
    },
}


class ConfigError(Exception):
    pass


class Config:
    """Validated experiment configuration."""

    def __init__(self, doc):
        self.doc = doc
        try:
            self.problem = LqProblem.from_dict(doc["problem"])
            self.problem.check()
        except InvalidProblem as exc:
            fields = sorted({f for e in exc.issues for f in getattr(e, "fields", ())})
            raise ConfigError(f"problem: {exc} (fields: {', '.join(fields)})") from exc
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"problem: {exc}") from exc
        self.x0 = _vector(doc, "x0", self.problem.n)
        self.trials = _count(doc, "trials")
        self.master_seed = _int(doc, "master_seed")
        self.acvar_Ls = _numbers(doc, "acvar_Ls", positive=True)
        self.leqr_gammas = None if doc.get("leqr_gammas") is None else _numbers(doc, "leqr_gammas", positive=True)
        self.exact_alphas = _numbers(doc, "exact_alphas", allow_empty=True)
        self.alphas = _numbers(doc, "alphas")
        for key in ("exact_alphas", "alphas"):
            if any(not 0.0 < a <= 1.0 for a in getattr(self, key)):
                raise ConfigError(f"{key}: every level must lie in (0, 1]")
        if not isinstance(doc.get("output_dir"), str):
            raise ConfigError("output_dir: expected a path string")
        self.output_dir = doc["output_dir"]
        self.grid = _grid(doc.get("grid"), "grid")
        v = doc.get("verify")
        if not isinstance(v, dict):
            raise ConfigError("verify: expected an object")
        self.verify_support = _numbers(v, "support", label="verify.support")
        self.verify_Ls = _numbers(v, "Ls", positive=True, label="verify.Ls")
        self.verify_trials = _count(v, "trials", label="verify.trials")
        self.verify_grid = _grid(v.get("grid"), "verify.grid")


def _vector(doc, key, n):
    try:
        arr = np.asarray(doc[key], dtype=float).reshape(-1)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"{key}: expected a numeric vector") from exc
    if arr.shape[0] != n or not np.all(np.isfinite(arr)):
        raise ConfigError(f"{key}: expected {n} finite entries")
    return arr


def _int(doc, key, label=None):
    val = doc.get(key)
    if isinstance(val, bool) or not isinstance(val, int):
        raise ConfigError(f"{label or key}: expected an integer, got {val!r}")
    return val


def _count(doc, key, label=None):
    val = _int(doc, key, label)
    if val < 1:
        raise ConfigError(f"{label or key}: must be at least 1")
    return val


def _numbers(doc, key, positive=False, allow_empty=False, label=None):
    label = label or key
    val = doc.get(key)
    if not isinstance(val, list) or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in val):
        raise ConfigError(f"{label}: expected a list of numbers")
    if not val and not allow_empty:
        raise ConfigError(f"{label}: must not be empty")
    if positive and any(not v > 0 for v in val):
        raise ConfigError(f"{label}: entries must be positive")
    return [float(v) for v in val]


def _grid(g, label):
    if not isinstance(g, dict):
        raise ConfigError(f"{label}: expected an object")
    try:
        out = {k: float(g[k]) for k in ("x_max", "s_min", "s_max")}
        out.update({k: int(g[k]) for k in ("nx", "ns", "nu")})
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"{label}: {exc}") from exc
    if out["x_max"] <= 0 or out["s_max"] <= out["s_min"] or min(out["nx"], out["ns"]) < 2 or out["nu"] < 1:
        raise ConfigError(f"{label}: degenerate grid")
    return out


def _make_grid(problem, g):
    return dp.default_grid(problem, x_max=g["x_max"], s_lim=(g["s_min"], g["s_max"]),
                           nx=g["nx"], ns=g["ns"], nu=g["nu"])


def load_config(path=None, overrides=None):
    """Merge the JSON document at ``path`` over the defaults and validate."""
    doc = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        try:
            user = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        unknown = sorted(set(user) - set(DEFAULT_CONFIG))
        if unknown:
            raise ConfigError(f"{path}: unknown field(s): {', '.join(unknown)}")
        for key, val in user.items():
            if isinstance(DEFAULT_CONFIG[key], dict) and isinstance(val, dict):
                doc[key] = _merge(doc[key], val)
            else:
                doc[key] = val
    for key, val in (overrides or {}).items():
        if val is not None:
            doc[key] = val
    return Config(doc)


def _merge(base, extra):
    out = dict(base)
    for k, v in extra.items():
        out[k] = _merge(out[k], v) if isinstance(out.get(k), dict) and isinstance(v, dict) else v
    return out


def write_atomic(path, text):
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(M):
    M = np.asarray(M)
    if np.isnan(M).any():
        return "-"
    if M.size == 1:
        return f"{float(M.reshape(-1)[0]):.6f}"
    return np.array2string(M, precision=6, separator=",", max_line_width=10_000).replace("\n", "")


def _table(rows, header):
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(str(v).rjust(w) for v, w in zip(r, widths)) for r in [header] + rows]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# subcommands


def cmd_riccati(cfg, family, param, out=sys.stdout):
    p = cfg.problem
    if family == "acvar":
        sch = acvar_recursion(p, (1.0 if param is None else param) * np.eye(p.n))
        rows = [[t, _fmt(sch.P[t]), f"{sch.a[t]:.6f}"] for t in range(p.N + 1)]
        header, feasible, failed_at = ["t", "P_t", "a_t"], True, None
    elif family == "lqr":
        sch = lqr_recursion(p)
        rows = [[t, _fmt(sch.P[t])] for t in range(p.N + 1)]
        header, feasible, failed_at = ["t", "P_t"], True, None
    elif family == "leqr":
        if param is None:
            raise ConfigError("--gamma is required for the leqr family")
        sch = leqr_recursion(p, param)
        rows = [[t, _fmt(sch.Pbar[t])] for t in range(p.N + 1)]
        header, feasible, failed_at = ["t", "Pbar_t"], sch.feasible, sch.failed_at
    else:
        if param is None:
            raise ConfigError("--lam is required for the lqgame family")
        sch = lq_game_recursion(p, param)
        rows = [[t, _fmt(sch.Phat[t])] for t in range(p.N + 1)]
        header, feasible, failed_at = ["t", "Phat_t"], sch.feasible, sch.failed_at
    print(f"family={family} N={p.N} feasible={feasible}", file=out)
    print(_table(rows, header), file=out)
    path = os.path.join(cfg.output_dir, f"riccati_{family}.json")
    write_atomic(path, json.dumps(sch.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"schedule written to {path}", file=out)
    if not feasible:
        print(f"error: {family} recursion infeasible at step t={failed_at}", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


def cmd_sweep(cfg, out=sys.stdout):
    p = cfg.problem
    grids = _make_grid(p, cfg.grid) if cfg.exact_alphas else None
    res = mc.tradeoff_sweep(p, cfg.x0, cfg.acvar_Ls, cfg.leqr_gammas, cfg.exact_alphas, cfg.trials,
                            SeedSchedule(cfg.master_seed), alphas=cfg.alphas, grids=grids)
    params = dict(cfg.doc)
    params["leqr_gammas"] = [r.parameter for r in res.family("leqr")]
    meta = {
        "seed": cfg.master_seed,
        "gamma_c": res.gamma_c,
        "params": params,
        "version": __version__,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    csv_path = os.path.join(cfg.output_dir, "tradeoff.csv")
    write_atomic(csv_path, res.to_csv())
    write_atomic(os.path.join(cfg.output_dir, "meta.json"), json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"gamma_c={res.gamma_c!r}; {len(res.rows)} policies x {len(cfg.alphas)} levels -> {csv_path}", file=out)
    return EXIT_OK


def cmd_verify(cfg, corrupt_a0=None, out=sys.stdout):
    p = cfg.problem
    if p.n != 1 or p.m != 1:
        raise Unsupported("robust DP requires scalar disturbances (the inner sup is an SDP for n > 1)")
    sigma2 = float(p.Sigma[0, 0])
    vg = dp.robust_value_iteration(p, dp.FiniteDisturbance(cfg.verify_support, sigma2),
                                   _make_grid(p, cfg.verify_grid))
    seeds = SeedSchedule(cfg.master_seed)
    report = {"seed": cfg.master_seed, "version": __version__, "grid": cfg.verify_grid,
              "support": cfg.verify_support, "checks": []}
    ok = True
    for L in cfg.verify_Ls:
        sch = acvar_recursion(p, L * np.eye(1))
        if corrupt_a0 is not None:
            sch.a[0] = corrupt_a0
        br = dp.verify_upper_bound(vg, sch)
        mcs = mc.validate_bound(p, sch, mc.standard_dists(sigma2), cfg.x0, cfg.verify_trials, seeds)
        entry = {"L": L, "a0": float(sch.a[0]), "dp": br.to_dict(),
                 "mc": [{"dist": b.label, "excess_mean": b.excess_mean, "stderr": b.stderr,
                         "margin": b.margin, "passed": b.passed} for b in mcs]}
        report["checks"].append(entry)
        passed = br.passed and all(b.passed for b in mcs)
        ok &= passed
        worst_mc = min(b.margin for b in mcs)
        print(f"L={L:g}: dp margin {br.min_margin:.6g} (eps_grid {br.eps_grid:.3g}), "
              f"mc min margin {worst_mc:.6g} -> {'PASS' if passed else 'FAIL'}", file=out)
        if not br.passed:
            x, s = br.worst_node
            print(f"  bound violated at node x={x!r}, s={s!r} by {br.max_violation:.6g}", file=out)
    report["passed"] = ok
    path = os.path.join(cfg.output_dir, "verify.json")
    write_atomic(path, json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"report written to {path}", file=out)
    return EXIT_OK if ok else EXIT_BOUND


def build_parser():
    ap = argparse.ArgumentParser(prog="cvarlq", description="Risk-averse LQ control toolkit.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config document (defaults: scalar benchmark)")
    common.add_argument("--seed", type=int, help="override master_seed")
    common.add_argument("--output-dir", help="override output_dir")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("riccati", parents=[common], help="run one recursion and print its schedule")
    r.add_argument("--family", choices=["acvar", "leqr", "lqgame", "lqr"], required=True)
    r.add_argument("--L", type=float, help="ACVaR risk level (scalar multiple of I, default 1)")
    r.add_argument("--gamma", type=float, help="LEQR risk parameter")
    r.add_argument("--lam", type=float, help="LQ-game attenuation level")

    s = sub.add_parser("sweep", parents=[common], help="Monte-Carlo trade-off sweep over policy families")
    s.add_argument("--trials", type=int, help="override trials")

    v = sub.add_parser("verify", parents=[common], help="DP and Monte-Carlo checks of the ACVaR bound")
    v.add_argument("--trials", type=int, help="override verify.trials")
    v.add_argument("--corrupt-a0", type=float, help=argparse.SUPPRESS)
    return ap


def main(argv=None, out=None):
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    overrides = {"master_seed": args.seed, "output_dir": args.output_dir}
    if args.command == "sweep":
        overrides["trials"] = args.trials
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "verify" and args.trials is not None:
            cfg.doc["verify"]["trials"] = args.trials
            cfg = Config(cfg.doc)
        if args.command == "riccati":
            param = {"acvar": args.L, "leqr": args.gamma, "lqgame": args.lam}.get(args.family)
            return cmd_riccati(cfg, args.family, param, out)
        if args.command == "sweep":
            return cmd_sweep(cfg, out)
        return cmd_verify(cfg, args.corrupt_a0, out)
    except (ConfigError, NotPositiveDefinite, RNotIdentity, BadAlpha, NotInAmbiguitySet) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NoFeasibleGamma, ConditioningError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except Unsupported as exc:
        print(f"unsupported: {exc}", file=sys.stderr)
        return EXIT_UNSUPPORTED


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
