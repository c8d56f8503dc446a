"""Command-line front end.

Exit codes: 0 positive verdict, 1 negative verdict, 2 input/usage error,
3 undetermined, 4 numeric failure.  Reports echo the effective
configuration and are byte-stable for a fixed seed.
"""

from __future__ import annotations

import argparse
import json
import random
import sys
from dataclasses import asdict, dataclass

import numpy as np

from . import expr as ex
from .lie import evaluate_word, nested_lie_along_affine
from .model import (
    CascadeSystem,
    InvalidSystemError,
    SystemFormatError,
    as_control_affine,
    load_system_file,
    preset,
    preset_names,
    validate,
)
from .obsv import (
    CLASS_PERIODIC,
    CLASS_UNDETERMINED,
    K_MAX_DEFAULT,
    PER_TOL_DEFAULT,
    RANK_TOL_DEFAULT,
    SEP_TOL_DEFAULT,
    VERDICT_SEPARATED,
    VERDICT_SHIFT,
    cascade_lflg,
    cascade_lglflg,
    find_separating_observable,
    is_aperiodic_system,
    local_rank,
    word_lflg,
    word_lglflg,
)
from .sim import (
    DIST_TOL_DEFAULT,
    DT_DEFAULT,
    T_END_DEFAULT,
    BlowUpError,
    FeedbackLaw,
    InputSignal,
    distinguishability_experiment,
    integrate,
    output_feedback_equilibria_check,
    parse_input_spec,
)
from .gramian import EPS_DEFAULT, empirical_gramian, input_sweep

EXIT_OK = 0
EXIT_NEGATIVE = 1
EXIT_USAGE = 2
EXIT_UNDETERMINED = 3
EXIT_NUMERIC = 4


@dataclass
class RunConfig:
    command: str
    system: str | None = None
    state: tuple[float, ...] | None = None
    state2: tuple[float, ...] | None = None
    inputs: tuple[str, ...] = ()
    t_end: float = T_END_DEFAULT
    dt: float = DT_DEFAULT
    k_max: int = K_MAX_DEFAULT
    l_max: int | None = None
    per_tol: float = PER_TOL_DEFAULT
    sep_tol: float = SEP_TOL_DEFAULT
    rank_tol: float = RANK_TOL_DEFAULT
    dist_tol: float = DIST_TOL_DEFAULT
    eps: float = EPS_DEFAULT
    seed: int = 0
    format: str = "json"
    out: str | None = None


class UsageError(ValueError):
    pass


def _load(cfg: RunConfig) -> CascadeSystem:
    if not cfg.system:
        raise UsageError("--system is required for this command")
    if cfg.system.startswith("preset:"):
        name = cfg.system.split(":", 1)[1]
        try:
            return preset(name)
        except KeyError:
            raise UsageError(
                f"unknown preset {name!r}; available: {', '.join(preset_names())}"
            ) from None
    return load_system_file(cfg.system)


def _parse_state(text: str, label: str) -> tuple[float, ...]:
    try:
        return tuple(float(p) for p in text.split(","))
    except ValueError:
        raise UsageError(f"{label} must be comma-separated numbers, got {text!r}") from None


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    return obj


def _word_dict(word) -> dict:
    return {"output": word.j, "word": list(word.mu), "order": len(word.mu)}


def _config_dict(cfg: RunConfig) -> dict:
    doc = _jsonable(asdict(cfg))
    doc.pop("out")  # where the report lands does not affect its content
    return doc


# ---------------------------------------------------------------------------
# subcommands: each returns (exit code, report dict, text lines)


def cmd_validate(cfg: RunConfig):
    try:
        sys_ = _load(cfg)
    except InvalidSystemError as err:
        report = {"valid": False, "violations": list(err.violations)}
        return EXIT_NEGATIVE, report, ["invalid:"] + [f"  {v}" for v in err.violations]
    violations = validate(sys_)
    if violations:
        return (
            EXIT_NEGATIVE,
            {"valid": False, "violations": violations},
            ["invalid:"] + [f"  {v}" for v in violations],
        )
    return EXIT_OK, {"valid": True, "violations": []}, ["valid"]


def cmd_observable(cfg: RunConfig):
    sys_ = _load(cfg)
    report = is_aperiodic_system(sys_, per_tol=cfg.per_tol, k_max=cfg.k_max, seed=cfg.seed)
    gammas = []
    lines = []
    for idx, v in enumerate(report.gamma_verdicts, start=1):
        entry = {"gain": idx, "classification": v.classification, "period": v.period}
        gammas.append(entry)
        if v.classification == CLASS_PERIODIC and v.period is not None:
            lines.append(f"gain {idx}: periodic, T={v.period:.6g}")
        else:
            lines.append(f"gain {idx}: {v.classification}")
    out = {"verdict": report.verdict, "gains": gammas}
    lines.insert(0, f"verdict: {report.verdict}")
    if report.verdict == "observable":
        code = EXIT_OK
    elif report.verdict == "not-observable":
        code = EXIT_NEGATIVE
    else:
        code = EXIT_UNDETERMINED
    return code, out, lines


def cmd_separate(cfg: RunConfig):
    sys_ = _load(cfg)
    if cfg.state is None or cfg.state2 is None:
        raise UsageError("separate needs --state and --state2")
    cert = find_separating_observable(
        sys_,
        cfg.state,
        cfg.state2,
        k_max=cfg.k_max,
        sep_tol=cfg.sep_tol,
        per_tol=cfg.per_tol,
        seed=cfg.seed,
    )
    out = {
        "verdict": cert.verdict,
        "witness": _word_dict(cert.witness) if cert.witness is not None else None,
        "value0": cert.value0,
        "value1": cert.value1,
        "bounds": _jsonable(cert.bounds),
    }
    lines = [f"verdict: {cert.verdict}"]
    if cert.verdict == VERDICT_SEPARATED:
        lines.append(
            f"witness output {cert.witness.j}, word {list(cert.witness.mu)}: "
            f"{cert.value0:.6g} vs {cert.value1:.6g}"
        )
        code = EXIT_OK
    elif cert.verdict == VERDICT_SHIFT:
        code = EXIT_NEGATIVE
    else:
        code = EXIT_UNDETERMINED
    return code, out, lines


def cmd_rank(cfg: RunConfig):
    sys_ = _load(cfg)
    if cfg.state is None:
        raise UsageError("rank needs --state")
    report = local_rank(sys_, cfg.state, l_max=cfg.l_max, rank_tol=cfg.rank_tol)
    out = {
        "rank": report.rank,
        "dim": report.dim,
        "locally_observable": report.locally_observable,
        "singular_values": _jsonable(report.singular_values),
        "words": [_word_dict(w) for w in report.words],
    }
    lines = [f"rank {report.rank}/{report.dim}"]
    return (EXIT_OK if report.locally_observable else EXIT_NEGATIVE), out, lines


def _single_input(cfg: RunConfig) -> InputSignal:
    if len(cfg.inputs) > 1:
        raise UsageError("this command takes a single --input")
    return parse_input_spec(cfg.inputs[0]) if cfg.inputs else InputSignal.zero()


def cmd_simulate(cfg: RunConfig):
    sys_ = _load(cfg)
    if cfg.state is None:
        raise UsageError("simulate needs --state")
    u = _single_input(cfg)
    traj = integrate(sys_, cfg.state, u, cfg.t_end, cfg.dt)
    final = traj.final_state
    out = {
        "input": u.describe(),
        "samples": len(traj.states),
        "final_state": _jsonable(final),
        "max_abs_output": float(np.max(np.abs(traj.outputs))),
    }
    lines = [
        f"{len(traj.states)} samples, final state "
        + ", ".join(f"{v:.6g}" for v in final)
    ]
    return EXIT_OK, out, lines, traj


def cmd_distinguish(cfg: RunConfig):
    sys_ = _load(cfg)
    if cfg.state is None or cfg.state2 is None:
        raise UsageError("distinguish needs --state and --state2")
    u = _single_input(cfg)
    res = distinguishability_experiment(
        sys_, cfg.state, cfg.state2, u, cfg.t_end, cfg.dt, dist_tol=cfg.dist_tol
    )
    out = {
        "classification": res.classification,
        "gap": res.gap,
        "first_divergence": res.first_divergence,
        "input": res.input,
    }
    lines = [
        f"{res.classification}: max output gap {res.gap:.6g}"
        + (f", first divergence at t={res.first_divergence:.6g}" if res.first_divergence is not None else "")
    ]
    if res.classification == "diverged":
        code = EXIT_OK
    elif res.classification == "identical":
        code = EXIT_NEGATIVE
    else:
        code = EXIT_UNDETERMINED
    return code, out, lines


def cmd_gramian(cfg: RunConfig):
    sys_ = _load(cfg)
    if cfg.state is None:
        raise UsageError("gramian needs --state")
    signals = [parse_input_spec(s) for s in (cfg.inputs or ("zero",))]
    ranked = input_sweep(sys_, cfg.state, signals, eps=cfg.eps, t_end=cfg.t_end, dt=cfg.dt)
    entries = []
    lines = []
    for idx, rep in ranked:
        entries.append(
            {
                "input_index": idx,
                "input": rep.input,
                "sigma_min": rep.sigma_min,
                "sigma_max": rep.sigma_max,
                "condition_number": rep.condition_number,
                "classification": rep.classification(),
                "weak_signal": rep.weak_signal,
                "singular_values": _jsonable(rep.singular_values),
            }
        )
        lines.append(
            f"{rep.input}: sigma_min={rep.sigma_min:.6g} ({rep.classification()})"
        )
    out = {"ranking": entries, "eps": cfg.eps}
    best = ranked[0][1].classification()
    if best == "observable":
        code = EXIT_OK
    elif best == "singular":
        code = EXIT_NEGATIVE
    else:
        code = EXIT_UNDETERMINED
    return code, out, lines


# ---------------------------------------------------------------------------
# self-check suite


_GAIN_POOL = ("sin(x)", "exp(-x^2)", "2 + sin(x) + 0.1*x", "tanh(x)", "1/(x + 3)")


def _random_system(rng: random.Random, n: int) -> CascadeSystem:
    gamma = tuple(ex.parse(rng.choice(_GAIN_POOL), {"x"}) for _ in range(n))
    zs = {f"z{i}" for i in range(1, n + 1)}
    F = tuple(
        ex.parse(f"-{round(rng.uniform(0.5, 2.0), 3)}*z{i}", zs) for i in range(1, n + 1)
    )
    b = tuple(rng.choice([-1.0, 1.0]) * round(rng.uniform(0.5, 2.0), 3) for _ in range(n))
    return CascadeSystem(n=n, gamma=gamma, F=F, b=b)


def _check_closed_forms(rng: random.Random) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(8):
        n = rng.randrange(1, 3)
        sys_ = _random_system(rng, n)
        ca = as_control_affine(sys_)
        state = tuple(rng.uniform(-1.5, 1.5) for _ in range(2 * n))
        i = rng.randrange(1, n + 1)
        for k in range(0, 4):
            for closed, word in (
                (cascade_lflg(sys_, i, k, state), word_lflg(i, k)),
                (cascade_lglflg(sys_, i, k, state), word_lglflg(i, k)),
            ):
                generic = evaluate_word(ca, word, state, l_max=2 * k + 1)
                gap = abs(closed - generic) / (1.0 + abs(generic))
                worst = max(worst, gap)
    return worst <= 1e-8, f"worst relative gap {worst:.3e}"


def _check_input_expansion(rng: random.Random) -> tuple[bool, str]:
    from .lie import ObservableWord
    from itertools import product

    worst = 0.0
    for _ in range(8):
        n = rng.randrange(1, 3)
        sys_ = _random_system(rng, n)
        ca = as_control_affine(sys_)
        state = tuple(rng.uniform(-1.2, 1.2) for _ in range(2 * n))
        j = rng.randrange(1, n + 1)
        depth = rng.randrange(1, 4)
        u_rows = [rng.uniform(-1.0, 1.0) for _ in range(depth)]
        lhs = nested_lie_along_affine(ca, u_rows, j, state, l_max=depth)
        rhs = 0.0
        for mu in product((0, 1), repeat=depth):
            coeff = 1.0
            for pos, pick in enumerate(mu):
                if pick:
                    coeff *= u_rows[depth - 1 - pos]
            rhs += coeff * evaluate_word(ca, ObservableWord(j, mu), state, l_max=depth)
        gap = abs(lhs - rhs) / (1.0 + abs(rhs))
        worst = max(worst, gap)
    return worst <= 1e-8, f"worst relative gap {worst:.3e}"


def _check_resting_continuum(_: random.Random) -> tuple[bool, str]:
    grid = (-5.0, -1.0, 0.0, 1.0, 5.0)
    worst = 0.0
    for law, q0 in (
        (FeedbackLaw.static("-y1"), ()),
        (FeedbackLaw.parse(1, ("y1",), "-y1 - q1", n_outputs=1), (0.0,)),
    ):
        rep = output_feedback_equilibria_check(preset("fish-1d-gauss"), law, q0, grid)
        worst = max(worst, rep.premise_residual, rep.max_residual)
    return worst <= 1e-12, f"max field residual {worst:.3e}"


def cmd_verify(cfg: RunConfig):
    rng = random.Random(cfg.seed)
    checks = (
        ("closed-form-identities", _check_closed_forms),
        ("input-polynomial-expansion", _check_input_expansion),
        ("resting-continuum", _check_resting_continuum),
    )
    results = []
    lines = []
    for name, fn in checks:
        passed, detail = fn(rng)
        results.append({"name": name, "passed": passed, "detail": detail})
        lines.append(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
    all_passed = all(r["passed"] for r in results)
    out = {"properties": results, "all_passed": all_passed, "seed": cfg.seed}
    return (EXIT_OK if all_passed else EXIT_NEGATIVE), out, lines


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="obsv-lab",
        description="Observability analysis of cascade systems with high-pass outputs.",
    )
    sub = p.add_subparsers(dest="command", required=True)
    names = ("validate", "observable", "separate", "rank", "simulate", "distinguish", "gramian", "verify")
    for name in names:
        s = sub.add_parser(name)
        s.add_argument("--system", help="model file path, or preset:<name>")
        s.add_argument("--state", help="comma-separated state, positions first then velocities")
        s.add_argument("--state2", help="second state for pairwise commands")
        s.add_argument(
            "--input",
            action="append",
            default=[],
            help="zero | const:<c> | sin:<a>,<w>[,<phi>] (repeatable for gramian)",
        )
        s.add_argument("--t-end", type=float, default=T_END_DEFAULT)
        s.add_argument("--dt", type=float, default=DT_DEFAULT)
        s.add_argument("--kmax", type=int, default=K_MAX_DEFAULT)
        s.add_argument("--lmax", type=int, default=None)
        s.add_argument("--per-tol", type=float, default=PER_TOL_DEFAULT)
        s.add_argument("--sep-tol", type=float, default=SEP_TOL_DEFAULT)
        s.add_argument("--rank-tol", type=float, default=RANK_TOL_DEFAULT)
        s.add_argument("--dist-tol", type=float, default=DIST_TOL_DEFAULT)
        s.add_argument("--eps", type=float, default=EPS_DEFAULT)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--format", choices=("json", "text", "csv"), default="json")
        s.add_argument("--out", help="write the report here instead of stdout")
    return p


_HANDLERS = {
    "validate": cmd_validate,
    "observable": cmd_observable,
    "separate": cmd_separate,
    "rank": cmd_rank,
    "simulate": cmd_simulate,
    "distinguish": cmd_distinguish,
    "gramian": cmd_gramian,
    "verify": cmd_verify,
}


def _emit(text: str, out_path: str | None) -> None:
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _render(cfg: RunConfig, report: dict, lines: list[str], traj=None) -> str:
    if cfg.format == "json":
        doc = {"command": cfg.command, "config": _config_dict(cfg), "report": report}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if cfg.format == "csv":
        if traj is not None:
            return traj.to_csv()
        if cfg.command == "gramian":
            rows = ["input,sigma"]
            for entry in report["ranking"]:
                for s in entry["singular_values"]:
                    rows.append(f"{entry['input']},{s:.17g}")
            return "\n".join(rows) + "\n"
        raise UsageError(f"csv format is not defined for {cfg.command}")
    return "\n".join(lines) + "\n"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.dt <= 0:
        print("error: --dt must be positive", file=sys.stderr)
        return EXIT_USAGE
    if args.t_end <= 0:
        print("error: --t-end must be positive", file=sys.stderr)
        return EXIT_USAGE
    try:
        state = _parse_state(args.state, "--state") if args.state else None
        state2 = _parse_state(args.state2, "--state2") if args.state2 else None
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    cfg = RunConfig(
        command=args.command,
        system=args.system,
        state=state,
        state2=state2,
        inputs=tuple(args.input),
        t_end=args.t_end,
        dt=args.dt,
        k_max=args.kmax,
        l_max=args.lmax,
        per_tol=args.per_tol,
        sep_tol=args.sep_tol,
        rank_tol=args.rank_tol,
        dist_tol=args.dist_tol,
        eps=args.eps,
        seed=args.seed,
        format=args.format,
        out=args.out,
    )
    try:
        result = _HANDLERS[cfg.command](cfg)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (ex.ParseError, SystemFormatError, InvalidSystemError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (BlowUpError, ex.DomainError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC

    code, report, lines = result[0], result[1], result[2]
    traj = result[3] if len(result) > 3 else None
    try:
        _emit(_render(cfg, report, lines, traj), cfg.out)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    return code


if __name__ == "__main__":
    sys.exit(main())
