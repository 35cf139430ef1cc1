"""Config-driven experiment runner.

Each subcommand reads a JSON config (flags override it), evaluates a grid
of points and writes CSV tables whose first line is a comment carrying the
library version and a hash of the resolved config.  Point seeds are derived
from the global seed and the point's coordinates, so results do not depend
on the number of worker processes.

Exit codes: 0 success, 2 bad configuration, 3 some grid points failed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .qmath import ValidationError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARTIAL = 3
MAX_GRID_SIDE = 200
MAX_BANDIT_N = 100_000


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config plumbing

DEFAULTS = {
    "phase-diagram": {
        "p": {"start": 0.0, "stop": 1.0, "num": 21}, "r": {"start": 0.0, "stop": 1.0, "num": 21},
        "n_bath": 1000, "dedup_tol": 1e-12, "max_nodes": 20000,
    },
    "tofe-compare": {
        "p": {"start": 0.0, "stop": 1.0, "num": 11}, "r": {"start": 0.0, "stop": 1.0, "num": 11},
        "n_beliefs": 201, "n_actions": 360, "T": 30, "n_history": 8, "lo_dedup": 1e-9, "lo_max_nodes": 4000,
        "causal_T": None,
    },
    "bandit-scaling": {
        "N": 30000, "n_checkpoints": 15, "N_min": 100, "trials": 50, "t": 5, "C": 1.0, "delta": 0.01,
        "zeta": 1.0, "lambda0": 1.0, "M": None, "full_traces": False,
    },
    "causal-dissipation": {
        "points": [{"p": 0.0, "r": 0.2}], "T": 3, "resolution": 64,
    },
    "msp-graph": {
        "p": 0.9, "r": 0.2, "process": "perturbed_coin", "policy": "lo", "dedup_tol": 1e-12, "max_nodes": 20000,
    },
    "protocol-check": {
        "pairs": 10, "M": [100, 1000, 10000], "n_runs": 10000,
    },
}


def grid_values(spec) -> list[float]:
    """A list, or ``{"start", "stop", "num"}`` for an inclusive uniform grid."""
    if isinstance(spec, dict):
        try:
            vals = np.linspace(float(spec["start"]), float(spec["stop"]), int(spec["num"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad grid spec {spec!r}") from exc
    elif isinstance(spec, (list, tuple)):
        vals = np.asarray(spec, dtype=float)
    else:
        vals = np.asarray([spec], dtype=float)
    vals = np.round(vals, 12)
    if vals.size == 0:
        raise ConfigError("empty grid")
    return [float(v) for v in vals]


def resolve_config(command: str, path: str | None, overrides: dict) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS[command]))
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(loaded) - set(cfg) - {"experiment", "seeds", "beta"}
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(loaded)
    cfg.setdefault("experiment", command)
    cfg.setdefault("seeds", [0])
    cfg.setdefault("beta", 1.0)
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    if not cfg["seeds"]:
        raise ConfigError("seed list must be nonempty")
    if not float(cfg["beta"]) > 0:
        raise ConfigError("beta must be positive")
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def point_seed(global_seed: int, *coords) -> int:
    """Seed derived from the global seed and a point's coordinates."""
    key = json.dumps([int(global_seed), [repr(float(c)) if isinstance(c, float) else c for c in coords]])
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little")


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else repr(float(v))
    return str(v)


def write_csv(path: Path, header: list[str], rows, cfg: dict) -> str:
    buf = io.StringIO()
    buf.write(f"# qworkagent {__version__} config_sha256={config_hash(cfg)}\r\n")
    wr = csv.writer(buf, lineterminator="\r\n")
    wr.writerow(header)
    for row in rows:
        wr.writerow([_fmt(v) for v in row])
    text = buf.getvalue()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(text.encode("utf-8"))
    return text


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items, chunksize=1))


def _coin(p: float, r: float):
    from .processes import make_perturbed_coin

    return make_perturbed_coin(p, r)


def _process(cfg: dict, p: float, r: float):
    from .processes import make_golden_mean_21

    name = cfg.get("process", "perturbed_coin")
    if name == "perturbed_coin":
        return _coin(p, r)
    if name == "golden_mean_21":
        return make_golden_mean_21(p, r)
    raise ConfigError(f"unknown process {name!r}")


# ---------------------------------------------------------------------------
# phase diagram

PHASE_HEADER = ["p", "r", "rate_quantum", "rate_classical", "rate_memoryless", "rate_overcommit",
                "memory_work", "regime", "status"]


def _phase_point(args):
    p, r, cfg = args
    from .belief import classify_return_map
    from .extraction import approach_rates

    try:
        hmm = _coin(p, r)
        kw = {"beta": float(cfg["beta"])}
        q = approach_rates(hmm, "quantum", dedup_tol=float(cfg["dedup_tol"]), max_nodes=int(cfg["max_nodes"]), **kw)
        c = approach_rates(hmm, "classical", dedup_tol=float(cfg["dedup_tol"]), max_nodes=int(cfg["max_nodes"]), **kw)
        m = approach_rates(hmm, "memoryless", **kw)
        o = approach_rates(hmm, "overcommitment", n_bath=int(cfg["n_bath"]), dedup_tol=float(cfg["dedup_tol"]),
                           max_nodes=int(cfg["max_nodes"]), **kw)
        regime = classify_return_map(p, r).regime
        status = "truncated" if (q.truncated or c.truncated or o.truncated) else "ok"
        return [p, r, q.rate, c.rate, m.rate, o.rate, q.rate - m.rate, regime, status]
    except Exception as exc:  # a failed point becomes a NaN row
        return [p, r] + [float("nan")] * 5 + ["", f"error: {type(exc).__name__}: {exc}"]


def run_phase_diagram(cfg: dict, threads: int = 1):
    ps, rs = grid_values(cfg["p"]), grid_values(cfg["r"])
    if len(ps) > MAX_GRID_SIDE or len(rs) > MAX_GRID_SIDE:
        raise ConfigError(f"grid larger than {MAX_GRID_SIDE} per side")
    rows = _map(_phase_point, [(p, r, cfg) for p in ps for r in rs], threads)
    return {"phase_diagram.csv": (PHASE_HEADER, rows)}, sum(str(x[-1]).startswith("error") for x in rows)


# ---------------------------------------------------------------------------
# TOFE comparison

TOFE_HEADER = ["p", "r", "f_lower", "f_TO", "w_LO", "delta", "unstable_beliefs", "status"]


def _tofe_point(args):
    p, r, cfg = args
    from .bounds import causal_dissipation, hierarchy_check
    from .processes import multi_time_state

    try:
        hmm = _coin(p, r)
        res = hierarchy_check(hmm, float(cfg["beta"]), {k: cfg[k] for k in
                                                          ("n_beliefs", "n_actions", "T", "n_history", "lo_dedup",
                                                           "lo_max_nodes")})
        delta = float("nan")
        if cfg.get("causal_T"):
            delta = causal_dissipation(multi_time_state(hmm, int(cfg["causal_T"])), 64,
                                       check_refinement=False).delta
        return [p, r, res.f_lower, res.f_to, res.w_lo, delta, res.unstable_beliefs, "ok"]
    except Exception as exc:
        return [p, r] + [float("nan")] * 4 + ["", f"error: {type(exc).__name__}: {exc}"]


def run_tofe_compare(cfg: dict, threads: int = 1):
    ps, rs = grid_values(cfg["p"]), grid_values(cfg["r"])
    if len(ps) > MAX_GRID_SIDE or len(rs) > MAX_GRID_SIDE:
        raise ConfigError(f"grid larger than {MAX_GRID_SIDE} per side")
    rows = _map(_tofe_point, [(p, r, cfg) for p in ps for r in rs], threads)
    return {"tofe_compare.csv": (TOFE_HEADER, rows)}, sum(str(x[-1]).startswith("error") for x in rows)


# ---------------------------------------------------------------------------
# bandit scaling


def checkpoints(N: int, n: int, n_min: int = 100) -> np.ndarray:
    """``n`` log-spaced horizons from ``n_min`` to ``N`` (always ending at ``N``)."""
    if n <= 1:
        return np.array([N])
    grid = np.rint(np.logspace(np.log10(min(n_min, N)), np.log10(N), n)).astype(int)
    grid[-1] = N
    return np.unique(grid)


def _bandit_trial(args):
    seed, trial, cfg, grid = args
    from .bandit import PureStateOracle, extract_while_learning, tomography_first

    adaptive_rng = np.random.default_rng(point_seed(seed, "adaptive", trial))
    psi = PureStateOracle.haar(adaptive_rng)
    tr = extract_while_learning(psi, int(cfg["N"]), float(cfg["delta"]), float(cfg["C"]),
                                None if cfg["M"] is None else int(cfg["M"]), adaptive_rng, t=int(cfg["t"]),
                                lambda0=float(cfg["lambda0"]), zeta=float(cfg["zeta"]), beta=float(cfg["beta"]))
    base = []
    for n in grid:
        # common random numbers: the same state and stream for every horizon of this trial
        rng = np.random.default_rng(point_seed(seed, "baseline", trial))
        base.append(tomography_first(PureStateOracle.haar(rng), int(n), rng, beta=float(cfg["beta"])).total())
    return tr, np.array(base)


def bandit_scaling(cfg: dict, threads: int = 1):
    """Adaptive and tomography-first dissipation over ``trials`` Haar-random states."""
    from .bandit import fit_scaling, crossover

    N = int(cfg["N"])
    if N > MAX_BANDIT_N:
        raise ConfigError(f"N exceeds the guard {MAX_BANDIT_N}")
    grid = checkpoints(N, int(cfg["n_checkpoints"]), int(cfg["N_min"]))
    jobs = [(int(seed), trial, cfg, grid) for seed in cfg["seeds"] for trial in range(int(cfg["trials"]))]
    results = _map(_bandit_trial, jobs, threads)
    traces = [tr for tr, _ in results]
    cum = np.array([tr.cumulative[grid - 1] for tr in traces])
    base = np.array([b for _, b in results])
    n = cum.shape[0]
    ci = lambda x: 1.96 * x.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(x.shape[1])
    summary = {
        "N": grid, "adaptive_mean": cum.mean(axis=0), "adaptive_ci95": ci(cum),
        "baseline_mean": base.mean(axis=0), "baseline_ci95": ci(base),
    }
    fits = {
        "adaptive": fit_scaling(grid, summary["adaptive_mean"], "log10_sq"),
        "baseline": fit_scaling(grid, summary["baseline_mean"], "sqrt"),
    }
    return {"traces": traces, "cum": cum, "base": base, "grid": grid, "summary": summary, "fits": fits,
            "crossover": crossover(grid, summary["adaptive_mean"], summary["baseline_mean"])}


def run_bandit_scaling(cfg: dict, threads: int = 1):
    from .bandit import TRACE_HEADER, summary_json

    res = bandit_scaling(cfg, threads)
    grid = res["grid"]
    s = res["summary"]
    summary_rows = [[int(grid[q]), s["adaptive_mean"][q], s["adaptive_ci95"][q], s["baseline_mean"][q],
                     s["baseline_ci95"][q]] for q in range(grid.shape[0])]
    trace_rows = []
    keep = None if cfg["full_traces"] else set((grid - 1).tolist())
    for trial, tr in enumerate(res["traces"]):
        for row in tr.to_rows(trial):
            if keep is None or row[1] - 1 in keep:
                trace_rows.append(row)
    extra = {"crossover_N": res["crossover"], "trials": len(res["traces"])}
    return {
        "bandit_summary.csv": (["N", "adaptive_mean", "adaptive_ci95", "baseline_mean", "baseline_ci95"],
                               summary_rows),
        "bandit_traces.csv": (TRACE_HEADER, trace_rows),
        "bandit_fits.json": summary_json(res["fits"], extra),
    }, 0


# ---------------------------------------------------------------------------
# causal dissipation

CAUSAL_HEADER = ["p", "r", "T", "delta", "delta_reversed", "delta_coarse", "flagged", "tofe_gap", "status"]


def _causal_point(args):
    pt, cfg = args
    from .bounds import causal_dissipation, finite_tofe, reverse_slots
    from .processes import multi_time_state
    from .qmath import von_neumann_entropy

    p, r, T = float(pt["p"]), float(pt["r"]), int(pt.get("T", cfg["T"]))
    try:
        rho = multi_time_state(_coin(p, r), T)
        res = causal_dissipation(rho, int(cfg["resolution"]), T)
        rev = causal_dissipation(reverse_slots(rho), int(cfg["resolution"]), T, check_refinement=False)
        beta = float(cfg["beta"])
        gap = beta * ((T * math.log(2.0) - von_neumann_entropy(rho)) / beta
                      - finite_tofe(rho, int(cfg["resolution"]), beta=beta))
        return [p, r, T, res.delta, rev.delta, res.coarse_delta, res.flagged, gap, "ok"]
    except Exception as exc:
        return [p, r, T] + [float("nan")] * 5 + [f"error: {type(exc).__name__}: {exc}"]


def run_causal_dissipation(cfg: dict, threads: int = 1):
    pts = cfg["points"]
    if not isinstance(pts, list) or not pts:
        raise ConfigError("points must be a nonempty list of {p, r[, T]}")
    rows = _map(_causal_point, [(pt, cfg) for pt in pts], threads)
    return {"causal_dissipation.csv": (CAUSAL_HEADER, rows)}, sum(str(x[-1]).startswith("error") for x in rows)


# ---------------------------------------------------------------------------
# mixed-state graph


def run_msp_graph(cfg: dict, threads: int = 1):
    from .belief import build_msp
    from .extraction import approach_policy

    hmm = _process(cfg, float(cfg["p"]), float(cfg["r"]))
    policy = {"lo": "quantum"}.get(cfg["policy"], cfg["policy"])
    try:
        tailor = approach_policy(hmm, policy, beta=float(cfg["beta"]))
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
    g = build_msp(hmm, tailor, float(cfg["dedup_tol"]), int(cfg["max_nodes"]), beta=float(cfg["beta"]))
    return {"msp_graph.json": g.to_json(), "msp_graph.dot": g.to_dot()}, 0


# ---------------------------------------------------------------------------
# protocol check

PROTOCOL_HEADER = ["pair", "M", "expected_work", "mc_mean", "std_error", "z", "bias", "zeta", "tail_empirical",
                   "tail_bound"]


def _protocol_pair(args):
    seed, pair, cfg = args
    from .extraction import protocol_check
    from .qmath import random_density

    rng = np.random.default_rng(point_seed(seed, "pair", pair))
    sigma = random_density(rng, 2)
    rho_star = random_density(rng, 2)
    out = []
    for M in cfg["M"]:
        c = protocol_check(sigma, rho_star, int(M), int(cfg["n_runs"]), rng, float(cfg["beta"]))
        for zeta, (tail, bound) in c.tails.items():
            out.append([pair, c.M, c.expected, c.mean, c.std_error, c.z, c.bias, zeta, tail, bound])
    return out


def run_protocol_check(cfg: dict, threads: int = 1):
    jobs = [(int(seed), pair, cfg) for seed in cfg["seeds"] for pair in range(int(cfg["pairs"]))]
    rows = [row for chunk in _map(_protocol_pair, jobs, threads) for row in chunk]
    return {"protocol_check.csv": (PROTOCOL_HEADER, rows)}, 0


RUNNERS = {
    "phase-diagram": run_phase_diagram,
    "tofe-compare": run_tofe_compare,
    "bandit-scaling": run_bandit_scaling,
    "causal-dissipation": run_causal_dissipation,
    "msp-graph": run_msp_graph,
    "protocol-check": run_protocol_check,
}


# ---------------------------------------------------------------------------
# entry point


def _seed_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qwork", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in RUNNERS:
        sp = sub.add_parser(name)
        sp.add_argument("--experiment", help="experiment name; prefixes output files")
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--seeds", type=_seed_list, help="comma-separated global seeds")
        sp.add_argument("--threads", type=int, default=1, help="worker processes")
        sp.add_argument("--beta", type=float, help="inverse temperature")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        cfg = resolve_config(args.command, args.config,
                             {"experiment": args.experiment, "seeds": args.seeds, "beta": args.beta})
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        outputs, failures = RUNNERS[args.command](cfg, args.threads)
    except (ConfigError, ValidationError, KeyError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    prefix = "" if cfg["experiment"] == args.command else f"{cfg['experiment']}_"
    for name, payload in outputs.items():
        path = out / f"{prefix}{name}"
        if isinstance(payload, tuple):
            write_csv(path, payload[0], payload[1], cfg)
        else:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(payload.encode("utf-8") if payload.endswith("\n") else (payload + "\n").encode("utf-8"))
        print(path)
    if failures:
        print(f"{failures} grid point(s) failed", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
