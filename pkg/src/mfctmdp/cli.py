"""Command-line driver: ``mfctmdp <command> [options]``.

Commands: validate, simulate, exact, limit, optimize, study, replicate-figures.
Flags override values from ``--config`` (JSON); model defaults come from the
registry.  ``--dry-run`` prints the resolved configuration and stops.
Module errors exit with status 1 and their class name on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import experiments as E
from .errors import InvalidParameter, MFCTMDPError
from .exact import finite_horizon_solve, policy_evaluation, stationary_policy_value, value_iteration
from .limit import integrate_limit, optimize_direct, optimize_switching
from .model import RelaxedControlPath, round_measure, validate_assumptions
from .models import MODEL_NAMES, initial_measure, priority_feedback, registry_get
from .simulate import Feedback, JumpAdapted, OpenLoop, monte_carlo_value, replication_seeds, simulate, write_trajectory_csv

log = logging.getLogger("mfctmdp")

FEEDBACK_RULES = {"priority": priority_feedback}
STUDIES = ("rate", "equivalence", "nonuniqueness", "feedback")


# --------------------------------------------------------------------------
# configuration


def _parse_set(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise InvalidParameter(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def resolve_config(args: argparse.Namespace) -> dict:
    """Config file values, then explicit flags on top."""
    cfg: dict = {}
    if getattr(args, "config", None):
        cfg.update(json.loads(Path(args.config).read_text()))
    params = dict(cfg.get("params", {}))
    params.update(_parse_set(getattr(args, "set", None)))
    if getattr(args, "beta", None) is not None:
        params["beta"] = args.beta
    if getattr(args, "horizon", None) is not None:
        params["T"] = args.horizon
    cfg["params"] = params
    for key, value in vars(args).items():
        if key in ("config", "set", "beta", "horizon", "func", "dry_run") or value is None:
            continue
        cfg[key] = value
    if cfg.get("seed") is None and "seed" in vars(args):
        env = os.environ.get("MFCTMDP_SEED")
        cfg["seed"] = int(env) if env not in (None, "") else 0
    if "jobs" in vars(args) and cfg.get("jobs") is None:
        cfg["jobs"] = os.cpu_count() or 1
    return cfg


def _model(cfg, strict=True):
    return registry_get(cfg["model"], cfg.get("params"), strict=strict)


def load_control(path, model) -> RelaxedControlPath:
    """Read a control written by ``optimize`` (keys ``breakpoints`` and ``weights``)."""
    data = json.loads(Path(path).read_text())
    horizon = float(data.get("horizon", model.horizon))
    return RelaxedControlPath(data["breakpoints"], data["weights"], horizon)


def make_policy(desc: str, model):
    """``constant`` | ``open_loop:FILE`` | ``jump_adapted:FILE`` | ``feedback:NAME``."""
    kind, _, arg = (desc or "constant").partition(":")
    if kind == "constant":
        T = model.horizon if model.finite_horizon else 30.0 / model.beta
        return OpenLoop(RelaxedControlPath.constant(model.actions.dirac(), T))
    if kind in ("open_loop", "jump_adapted"):
        path = load_control(arg, model)
        return OpenLoop(path) if kind == "open_loop" else JumpAdapted(path)
    if kind == "feedback":
        if arg not in FEEDBACK_RULES:
            raise InvalidParameter(f"unknown feedback rule {arg!r}; choose from {', '.join(FEEDBACK_RULES)}")
        theta = np.array([model.params.get("priority_threshold", 1e-4)])
        return Feedback(FEEDBACK_RULES[arg], theta, arg)
    raise InvalidParameter(f"unknown policy descriptor {desc!r}")


def _out(cfg) -> Path:
    return Path(cfg.get("out") or "mfctmdp_out")


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=E._plain))


# --------------------------------------------------------------------------
# commands


def cmd_validate(cfg) -> int:
    model = _model(cfg, strict=False)
    report = validate_assumptions(model).as_dict()
    report["model"] = model.name
    _emit(report)
    return 0 if report["ok"] else 2


def cmd_simulate(cfg) -> int:
    model = _model(cfg)
    N = int(cfg["N"])
    policy = make_policy(cfg.get("policy"), model)
    mu0 = initial_measure(model)
    seed = cfg["seed"]
    out = _out(cfg)
    traj = simulate(model, N, mu0, policy, replication_seeds(seed, 1)[0])
    csv_path = write_trajectory_csv(traj, out / f"simulate_{model.name}_{N}.csv", {"seed": seed, "policy": cfg.get("policy", "constant")})
    res = monte_carlo_value(model, N, mu0, policy, int(cfg.get("replications", 100)), seed, jobs=int(cfg["jobs"]))
    print(f"{model.name} N={N}: value {res.mean:.10g} +- {res.se:.3g} (SE, {res.values.size} replications); path in {csv_path}")
    return 0


def cmd_exact(cfg) -> int:
    model = _model(cfg)
    N = int(cfg["N"])
    policy = cfg.get("policy")
    if policy:
        pol = make_policy(policy, model)
        if model.finite_horizon:
            table = policy_evaluation(model, N, pol)
        elif isinstance(pol, Feedback):
            table = stationary_policy_value(model, N, lambda c: pol.profile(c, N))
        else:
            table = stationary_policy_value(model, N, pol.path.weights[0])
    elif model.finite_horizon:
        table = finite_horizon_solve(model, N, cfg.get("steps"))
    else:
        table = value_iteration(model, N)
    path = table.to_csv(_out(cfg) / f"exact_{model.name}_{N}.csv")
    counts = round_measure(initial_measure(model), N).as_array()
    print(f"{model.name} N={N}: exact value {table.value_at(counts):.12g} at counts {counts.tolist()}; {table.lattice.size} rows in {path}")
    return 0


def cmd_limit(cfg) -> int:
    model = _model(cfg)
    pol = make_policy(cfg.get("policy"), model)
    if not isinstance(pol, OpenLoop):
        raise InvalidParameter("the limit command takes constant or open_loop:FILE controls")
    traj = integrate_limit(model, initial_measure(model), pol.path, cfg.get("steps"))
    path = traj.to_csv(_out(cfg) / f"limit_{model.name}.csv", model)
    print(f"{model.name}: objective {traj.value:.12g}; max projection {traj.max_projection:.3g}; path in {path}")
    return 0


def cmd_optimize(cfg) -> int:
    model = _model(cfg)
    fam = cfg.get("family", "three_phase" if model.name == "machine_replacement" else "one_switch")
    if fam == "direct":
        res = optimize_direct(model, n_nodes=int(cfg.get("nodes", 40)))
    else:
        res = optimize_switching(model, fam)
    out = _out(cfg)
    res.to_json(out / f"optimize_{model.name}.json")
    res.trajectory.to_csv(out / f"optimize_{model.name}.csv", model)
    params = ", ".join(f"{k}={v:.6g}" for k, v in res.parameters.items())
    print(f"{model.name} [{fam}]: {params}{'; ' if params else ''}objective {res.value:.12g}")
    return 0


def _study_control(cfg, model):
    if cfg.get("control"):
        return load_control(cfg["control"], model)
    fam = cfg.get("family", "three_phase" if model.name == "machine_replacement" else "one_switch")
    return optimize_switching(model, fam).control


def cmd_study(cfg) -> int:
    name = cfg["study"]
    seed = cfg["seed"]
    out = _out(cfg)
    if name == "rate":
        model = _model(cfg)
        Ns = _int_list(cfg.get("Ns", "10,20,40,80,160,320"))
        mode = cfg.get("mode") or ("exact" if model.n_states == 2 else "mc")
        res = E.rate_study(model, _study_control(cfg, model), Ns, mode, seed, int(cfg.get("replications", 200)), out_dir=out)
        for N, g, s in zip(res.Ns, res.gaps, res.sqrt_n_gaps):
            print(f"N={N:>6d} gap={g:.6e} sqrtN*gap={s:.6e}")
        print(f"slope {res.slope:.4g}; max/median sqrtN*gap {res.ratio_max_to_median:.4g}; output in {out}")
    elif name == "equivalence":
        rep = E.equivalence_study(N=int(cfg.get("N") or 2), seed=seed, replications=int(cfg.get("replications", 2000)), out_dir=out)
        _emit(rep)
    elif name == "nonuniqueness":
        _emit(E.nonuniqueness_demo(seed=seed, out_dir=out))
    elif name == "feedback":
        kw = {"seed": seed, "out_dir": out, "replications": int(cfg.get("replications", 3))}
        if cfg.get("Ns"):
            kw["Ns"] = _int_list(cfg["Ns"])
        if cfg.get("N"):
            kw["N"] = int(cfg["N"])
        _emit(E.feedback_nonconvergence_demo(**kw))
    return 0


def cmd_replicate(cfg) -> int:
    rep = E.replicate_figures(cfg["example"], seed=cfg["seed"], out_dir=_out(cfg))
    _emit(rep["summary"])
    return 0


# --------------------------------------------------------------------------
# parser


def _common(p, model=True, seed=True, jobs=False):
    p.add_argument("--config", help="JSON file with default values for any option")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a model parameter (repeatable)")
    p.add_argument("--dry-run", action="store_true", help="print the resolved configuration and exit")
    p.add_argument("--out", help="output directory (default ./mfctmdp_out)")
    if model:
        p.add_argument("--model", choices=MODEL_NAMES)
        p.add_argument("--beta", type=float, help="discount rate")
        p.add_argument("--horizon", type=float, help="time horizon T (inf for infinite)")
    if seed:
        p.add_argument("--seed", type=int, help="root seed (default: $MFCTMDP_SEED or 0)")
    if jobs:
        p.add_argument("--jobs", type=int, help="worker processes (default: all cores)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mfctmdp", description="Mean-field controlled Markov population models.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check the model assumptions")
    _common(p, seed=False)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("simulate", help="simulate the N-agent system")
    _common(p, jobs=True)
    p.add_argument("--N", type=int)
    p.add_argument("--policy", help="constant | open_loop:FILE | jump_adapted:FILE | feedback:priority")
    p.add_argument("--replications", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("exact", help="exact finite-N dynamic programming")
    _common(p, seed=False)
    p.add_argument("--N", type=int)
    p.add_argument("--policy", help="evaluate this policy instead of optimizing")
    p.add_argument("--steps", type=int, help="backward time steps")
    p.set_defaults(func=cmd_exact)

    p = sub.add_parser("limit", help="integrate the deterministic limit")
    _common(p, seed=False)
    p.add_argument("--policy", help="constant | open_loop:FILE")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_limit)

    p = sub.add_parser("optimize", help="optimize the deterministic control problem")
    _common(p, seed=False)
    p.add_argument("--family", choices=("one_switch", "three_phase", "direct"))
    p.add_argument("--nodes", type=int, help="control nodes for --family direct")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("study", help="run a scripted study")
    p.add_argument("study", choices=STUDIES)
    _common(p, jobs=True)
    p.add_argument("--N", type=int)
    p.add_argument("--Ns", help="comma-separated N values")
    p.add_argument("--mode", choices=("exact", "mc"))
    p.add_argument("--replications", type=int)
    p.add_argument("--family", choices=("one_switch", "three_phase"))
    p.add_argument("--control", help="control JSON (as written by optimize) for the rate study")
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("replicate-figures", help="write CSV data for one application")
    p.add_argument("example", choices=E.EXAMPLES)
    _common(p, model=False)
    p.set_defaults(func=cmd_replicate)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        cfg.pop("verbose", None)
        needs_model = args.command not in ("replicate-figures",) and not (args.command == "study" and cfg.get("study") in ("equivalence", "nonuniqueness", "feedback"))
        if needs_model and not cfg.get("model"):
            ap.error("--model is required")
        if args.command in ("simulate", "exact") and not cfg.get("N"):
            ap.error("--N is required")
        if args.dry_run:
            _emit(cfg)
            return 0
        return args.func(cfg)
    except MFCTMDPError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
