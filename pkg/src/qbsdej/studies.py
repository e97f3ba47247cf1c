"""The five canonical studies driven by the CLI."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .analysis import CSV_COLUMNS, comparison_test, stability_report
from .config import ExperimentConfig, StateTerminal, gaussian_entropic_oracle
from .errors import ConfigurationError
from .solver import PicardConfig, XiBoundWarning, picard_solve, solve_exact, solve_general


@dataclass
class StudyResult:
    study: str
    passed: bool
    key_metrics: dict
    rows: list
    columns: tuple = CSV_COLUMNS
    details: dict = field(default_factory=dict)


def _scale_to(xi: np.ndarray, target: float) -> np.ndarray:
    """Rescale so that max |xi| equals target without overshooting by rounding."""
    sup = float(np.max(np.abs(xi)))
    if sup == 0:
        return xi
    out = xi * (target / sup)
    while float(np.max(np.abs(out))) > target:
        out = out * (1 - 2.0**-52)
    return out


def observed_order(Ns, errors) -> float:
    """Negative slope of log2(error) against log2(N)."""
    x = np.log2(np.asarray(Ns, dtype=float))
    y = np.log2(np.asarray(errors, dtype=float))
    return float(-np.polyfit(x, y, 1)[0])


def entropic_convergence(cfg: ExperimentConfig) -> StudyResult:
    gen, term = cfg.generator, cfg.terminal
    if gen.kind != "entropic":
        raise ConfigurationError("generator.kind: entropic-convergence needs the entropic generator")
    if not isinstance(term, StateTerminal) or term.transform != "identity" or np.any(np.asarray(term.jumps) != 0):
        raise ConfigurationError(
            "terminal: entropic-convergence needs a state terminal of the Brownian sum "
            "(identity transform, zero jump coefficients)"
        )
    b = np.asarray(term.brownian, dtype=float)
    b = np.full(cfg.model.d, float(b)) if b.ndim == 0 else b
    if term.scale <= 0:
        raise ConfigurationError("terminal.scale: must be > 0 for entropic-convergence")
    # clip(scale * X, lo, hi) == scale * clip(X, lo/scale, hi/scale) for scale > 0
    clip = tuple(c / term.scale for c in term.clip) if term.clip is not None else None
    base = gaussian_entropic_oracle(gen.gamma * term.scale, cfg.model.T, term.offset,
                                    float(np.linalg.norm(b)), clip)
    oracle = base * term.scale
    Ns, errs, rows = [], [], []
    for N in cfg.study.N_list:
        model = cfg.build_model(N)
        g = cfg.build_generator(model)
        xi = cfg.build_terminal(model)
        y0 = solve_exact(model, g, xi, cfg.study.scheme).y0
        err = abs(y0 - oracle)
        Ns.append(N)
        errs.append(err)
        rows.append({"N": N, "Y0": y0, "oracle": oracle, "abs_error": err})
    order = observed_order(Ns, errs) if len(Ns) > 1 else math.nan
    decreasing = all(b < a for a, b in zip(errs, errs[1:]))
    ratio = errs[-1] / errs[0] if errs[0] > 0 else 0.0
    passed = decreasing and order >= cfg.study.min_order and ratio <= cfg.study.max_error_ratio
    return StudyResult(
        "entropic-convergence", passed,
        {"observed_order": order, "error_ratio": ratio, "decreasing": decreasing, "oracle": oracle},
        rows, ("N", "Y0", "oracle", "abs_error"),
    )


def contraction(cfg: ExperimentConfig) -> StudyResult:
    model = cfg.build_model()
    g = cfg.build_generator(model)
    s = cfg.study
    bound = PicardConfig.xi_bound(g.params, model.T)
    xi = _scale_to(cfg.build_terminal(model), (s.xi_scale or 1.0) * bound)
    pc = PicardConfig(max_iters=s.max_iters, tol=s.tol, D=s.D, scheme=s.scheme)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", XiBoundWarning)
        _, trace = picard_solve(model, g, xi, pc)
    d = trace.distances
    rows = [
        {"iter": i + 1, "ball_distance": dist, "ratio": dist / d[i - 1] if i and d[i - 1] > 0 else math.nan,
         "ball_value": bv}
        for i, (dist, bv) in enumerate(zip(d, trace.ball_values))
    ]
    passed = (trace.converged and trace.final_distance < s.tol and trace.monotone
              and trace.measured_ratio <= s.max_ratio and trace.in_ball)
    metrics = {
        "iterations": trace.iterations,
        "final_distance": trace.final_distance,
        "measured_ratio": trace.measured_ratio,
        "monotone": trace.monotone,
        "in_ball": trace.in_ball,
        "radius": trace.radius,
        "xi_bound": bound,
        "xi_sup": trace.xi_norm,
        "exceeds_bound": trace.exceeds_bound,
    }
    return StudyResult("contraction", passed, metrics, rows, ("iter", "ball_distance", "ratio", "ball_value"))


def splitting(cfg: ExperimentConfig) -> StudyResult:
    model = cfg.build_model()
    g = cfg.build_generator(model)
    s = cfg.study
    bound = PicardConfig.xi_bound(g.params, model.T)
    xi = _scale_to(cfg.build_terminal(model), (s.xi_scale or 10.0) * bound)
    pc = PicardConfig(max_iters=s.max_iters, tol=s.tol, D=s.D, scheme=s.scheme)
    triple, report = solve_general(model, g, xi, pc)
    oracle = solve_exact(model, g, xi, s.scheme)
    diff = triple.max_abs_diff(oracle)
    rows = [
        {k: st[k] for k in ("stage", "xi_sup", "iterations", "final_distance", "measured_ratio", "min_weight")}
        for st in report.stages
    ]
    passed = diff <= s.match_tol and report.max_residual < s.residual_tol
    metrics = {"n": report.n, "xi_bound": bound, "max_node_diff": diff,
               "max_residual": report.max_residual, "y0": triple.y0, "oracle_y0": oracle.y0}
    return StudyResult("splitting", passed, metrics, rows,
                       ("stage", "xi_sup", "iterations", "final_distance", "measured_ratio", "min_weight"))


def _add_constant(g, c: float):
    return replace(g, func=lambda k, nodes, y, z, u: g(k, nodes, y, z, u) + c, name=f"{g.name}+{c:g}")


def comparison(cfg: ExperimentConfig) -> StudyResult:
    model = cfg.build_model()
    g = cfg.build_generator(model)
    s = cfg.study
    case = s.case or ("royer" if cfg.generator.kind in ("royer", "linear", "zero") else "convex")
    rng = cfg.rng()
    rows, violations, pre_fail, eq_checked, eq_fail = [], 0, 0, 0, 0
    for t in range(s.trials):
        xi1 = cfg.build_terminal(model, rng)
        xi2 = xi1 + rng.uniform(0.0, s.spread, xi1.shape)
        g2 = _add_constant(g, float(rng.uniform(0.0, s.spread)))
        v = comparison_test(model, (g, xi1), (g2, xi2), case, tol=s.tol)
        rows += v.rows(str(t))
        violations += len(v.violations)
        pre_fail += not v.precondition_ok
    # equal inputs exercise the equality clause
    for t in range(max(1, s.trials // 10)):
        xi = cfg.build_terminal(model, rng)
        v = comparison_test(model, (g, xi), (g, xi.copy()), case, tol=s.tol)
        rows += v.rows(f"eq{t}")
        violations += len(v.violations)
        eq_checked += v.equality_checked
        eq_fail += not v.equality_holds
    passed = violations == 0 and pre_fail == 0 and eq_fail == 0
    metrics = {"case": case, "trials": s.trials, "violations": violations,
               "precondition_failures": pre_fail, "equality_checked": eq_checked, "equality_failures": eq_fail}
    return StudyResult("comparison", passed, metrics, rows)


def y_independent(cfg: ExperimentConfig) -> bool:
    gen = cfg.generator
    return gen.kind in ("entropic", "zero") or getattr(gen, "a", 0.0) == 0.0


def _stability_batch(cfg, model, g, rng, tag: str):
    rows, ratios = [], []
    for t in range(cfg.study.trials):
        xi1 = cfg.build_terminal(model, rng)
        xi2 = cfg.build_terminal(model, rng)
        rep = stability_report(model, g, xi1, xi2, cfg.study.scheme)
        rows += rep.rows(f"{tag}{t}")
        ratios.append(rep.ratio)
    return rows, ratios


def stability(cfg: ExperimentConfig) -> StudyResult:
    model = cfg.build_model()
    g = cfg.build_generator(model)
    rows, ratios = _stability_batch(cfg, model, g, cfg.rng(0), "a")
    rows2, ratios2 = _stability_batch(cfg, model, g, cfg.rng(1), "b")
    rows += rows2
    m1, m2 = max(ratios), max(ratios2)
    variation = max(m1, m2) / min(m1, m2) if min(m1, m2) > 0 else math.inf
    finite = all(math.isfinite(r) for r in ratios + ratios2)
    metrics = {"max_ratio_seed_a": m1, "max_ratio_seed_b": m2, "seed_variation": variation, "finite": finite}
    translation_ok = True
    if y_independent(cfg):
        xi = cfg.build_terminal(model, cfg.rng(2))
        rep = stability_report(model, g, xi, xi + 0.1, cfg.study.scheme)
        translation_ok = (abs(rep.ratio_sup - 1.0) <= 1e-9 and rep.dZ_bmo <= 1e-20 and rep.dU_bmo <= 1e-20)
        rows.append({"trial_id": "translation", "quantity": "translation_ratio",
                     "lhs": rep.ratio, "rhs": 1.0, "pass": translation_ok})
        metrics["translation_ratio"] = rep.ratio
        metrics["translation_bmo"] = rep.dZ_bmo + rep.dU_bmo
    passed = finite and variation < cfg.study.max_seed_variation and translation_ok
    return StudyResult("stability", passed, metrics, rows)


RUNNERS = {
    "entropic-convergence": entropic_convergence,
    "contraction": contraction,
    "splitting": splitting,
    "comparison": comparison,
    "stability": stability,
}


def run_study(cfg: ExperimentConfig) -> StudyResult:
    return RUNNERS[cfg.study.kind](cfg)
