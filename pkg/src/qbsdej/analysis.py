"""Norms, energy inequalities and property harnesses on solved triples.

Every harness returns a report with a ``passed`` flag and ``rows()`` in the
tabular layout ``trial_id, quantity, lhs, rhs, pass`` used by the CLI.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .generators import Generator
from .lattice import LatticeModel, ProbabilityWeights, stack_terminal
from .norms import (
    NormReport,
    compute_norms,
    u_increments,
    z_increments,
)
from .solver import SolutionTriple, solve_exact

__all__ = [
    "NormReport",
    "compute_norms",
    "EnergyReport",
    "energy_check",
    "moment_of_sum",
    "ComparisonVerdict",
    "comparison_test",
    "StabilityReport",
    "stability_report",
    "PriorBoundReport",
    "prior_bound_check",
    "envelope_profile",
    "write_csv",
    "CSV_COLUMNS",
]

CSV_COLUMNS = ("trial_id", "quantity", "lhs", "rhs", "pass")
TOL = 1e-12


def _row(trial, quantity, lhs, rhs, ok) -> dict:
    return {"trial_id": trial, "quantity": quantity, "lhs": float(lhs), "rhs": float(rhs), "pass": bool(ok)}


# ---- energy inequalities ------------------------------------------------------------


def moment_of_sum(model: LatticeModel, increments: list, p: int,
                  weights: ProbabilityWeights | None = None) -> float:
    """E[(sum_k a_k)^p] for predictable a_k, by a backward binomial recursion.

    M_k^q = E_k[(sum_{j>=k} a_j)^q] = sum_r C(q, r) a_k^r E_k[M_{k+1}^{q-r}].
    """
    N = model.N
    M = [np.ones(model.n_nodes(N))] + [np.zeros(model.n_nodes(N)) for _ in range(p)]
    for k in reversed(range(N)):
        a = increments[k]
        nxt = [model.expect(k, Mq, weights) for Mq in M]
        M = [sum(math.comb(q, r) * a**r * nxt[q - r] for r in range(q + 1)) for q in range(p + 1)]
    return float(M[p][0])


@dataclass
class EnergyReport:
    p: int
    lhs_z: float
    rhs_z: float
    lhs_u: float
    rhs_u: float

    @property
    def passed(self) -> bool:
        return self.lhs_z <= self.rhs_z + TOL and self.lhs_u <= self.rhs_u + TOL

    def rows(self, trial="0") -> list:
        return [
            _row(trial, f"energy_z_p{self.p}", self.lhs_z, self.rhs_z, self.lhs_z <= self.rhs_z + TOL),
            _row(trial, f"energy_u_p{self.p}", self.lhs_u, self.rhs_u, self.lhs_u <= self.rhs_u + TOL),
        ]


def energy_check(model: LatticeModel, triple, p: int,
                 weights: ProbabilityWeights | None = None) -> EnergyReport:
    """E[(sum |Z|^2 h)^p] <= 2 p! (4 |Z|^2_BMO)^p and the analogue for U."""
    if not 1 <= int(p) <= 6:
        raise ValueError("energy_check needs 1 <= p <= 6")
    p = int(p)
    norms = compute_norms(model, triple, weights)
    c = 2.0 * math.factorial(p)
    lz = moment_of_sum(model, z_increments(model, triple.Z), p, weights)
    if model.m:
        lu = moment_of_sum(model, u_increments(model, triple.U), p, weights)
    else:
        lu = 0.0
    return EnergyReport(p, lz, c * (4 * norms.h2_bmo) ** p, lu, c * (4 * norms.j2_bmo) ** p)


# ---- comparison -------------------------------------------------------------------


@dataclass
class ComparisonVerdict:
    violations: list  # (step, node, y1, y2)
    precondition_failures: list  # human-readable descriptions
    equality_checked: bool = False
    equality_holds: bool = True
    y0_gap: float = 0.0
    max_gap: float = 0.0

    @property
    def precondition_ok(self) -> bool:
        return not self.precondition_failures

    @property
    def passed(self) -> bool:
        return self.precondition_ok and not self.violations and self.equality_holds

    def rows(self, trial="0") -> list:
        if not self.precondition_ok:
            return [_row(trial, "precondition", len(self.precondition_failures), 0, False)]
        out = [_row(trial, "comparison", self.max_gap, 0.0, not self.violations)]
        if self.equality_checked:
            out.append(_row(trial, "equality_clause", float(not self.equality_holds), 0.0, self.equality_holds))
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(passed=self.passed, precondition_ok=self.precondition_ok)
        return d


def comparison_test(model: LatticeModel, first: tuple, second: tuple, case: str = "royer",
                    tol: float = TOL, equality_tol: float = 1e-10, scheme: str = "implicit") -> ComparisonVerdict:
    """Check Y1 <= Y2 node-wise for (g1, xi1) dominated by (g2, xi2).

    Preconditions (xi1 <= xi2 and g1 <= g2 along the second solution) are
    reported separately and never count as comparison failures. Under the
    royer case, Y1_0 == Y2_0 must force the two triples to coincide.
    """
    if case not in ("royer", "convex"):
        raise ValueError(f"unknown comparison case {case!r}")
    (g1, xi1), (g2, xi2) = first, second
    xi1, xi2 = stack_terminal(xi1, model), stack_terminal(xi2, model)
    pre = []
    bad = np.flatnonzero(xi1 > xi2 + tol)
    if bad.size:
        pre.append(f"xi1 > xi2 at {bad.size} leaves (first leaf {int(bad[0])})")
    t1 = solve_exact(model, g1, xi1, scheme)
    t2 = solve_exact(model, g2, xi2, scheme)
    for k in range(model.N):
        nodes = model.nodes(k)
        args = (k, nodes, t2.Y[k], t2.Z[k], t2.U[k])
        excess = g1(*args) - g2(*args)
        if (excess > tol).any():
            pre.append(f"g1 > g2 along the second solution at step {k} node {int(np.argmax(excess))}")
            break
    violations, max_gap = [], -math.inf
    for k, (y1, y2) in enumerate(zip(t1.Y, t2.Y)):
        gap = y1 - y2
        max_gap = max(max_gap, float(gap.max()))
        violations += [(k, int(i), float(y1[i]), float(y2[i])) for i in np.flatnonzero(gap > tol)]
    verdict = ComparisonVerdict(violations, pre, y0_gap=t2.y0 - t1.y0, max_gap=max_gap)
    if case == "royer" and abs(t1.y0 - t2.y0) <= tol:
        verdict.equality_checked = True
        verdict.equality_holds = t1.max_abs_diff(t2) <= equality_tol
    return verdict


# ---- stability -------------------------------------------------------------------


@dataclass
class StabilityReport:
    dY_sup: float
    dxi_sup: float
    dU_linf: float
    dZ_bmo: float  # squared
    dU_bmo: float  # squared

    @property
    def ratio_sup(self) -> float:
        return 0.0 if self.dxi_sup == 0 else (self.dY_sup + self.dU_linf) / self.dxi_sup

    @property
    def ratio_bmo(self) -> float:
        return 0.0 if self.dxi_sup == 0 else (self.dZ_bmo + self.dU_bmo) / self.dxi_sup

    @property
    def ratio(self) -> float:
        """Smallest constant C satisfying both stability estimates on this pair."""
        return max(self.ratio_sup, self.ratio_bmo)

    @property
    def bmo_deltas(self) -> tuple:
        return (self.dZ_bmo, self.dU_bmo)

    @property
    def passed(self) -> bool:
        return math.isfinite(self.ratio)

    def rows(self, trial="0") -> list:
        return [
            _row(trial, "stability_sup", self.dY_sup + self.dU_linf, self.ratio * self.dxi_sup, True),
            _row(trial, "stability_bmo", self.dZ_bmo + self.dU_bmo, self.ratio * self.dxi_sup, True),
            _row(trial, "stability_ratio", self.ratio, math.inf, self.passed),
        ]

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(ratio_sup=self.ratio_sup, ratio_bmo=self.ratio_bmo, ratio=self.ratio)
        return d


def stability_report(model: LatticeModel, g: Generator, xi1, xi2, scheme: str = "implicit") -> StabilityReport:
    """Measure the stability constant for one pair of terminal conditions."""
    xi1, xi2 = stack_terminal(xi1, model), stack_terminal(xi2, model)
    diff = solve_exact(model, g, xi1, scheme) - solve_exact(model, g, xi2, scheme)
    n = compute_norms(model, diff)
    return StabilityReport(n.s_inf, float(np.max(np.abs(xi1 - xi2))), n.linf_nu, n.h2_bmo, n.j2_bmo)


# ---- a-priori bounds ----------------------------------------------------------------


def envelope_profile(model: LatticeModel, gamma: float, beta: float, M: float, xi_sup: float) -> np.ndarray:
    """Per-step bound gamma M (e^{beta tau} - 1)/beta + gamma e^{beta tau} |xi|, tau = T - t_k."""
    tau = model.T - np.array([model.grid.time(k) for k in range(model.N + 1)])
    growth = np.expm1(beta * tau) / beta if beta > 0 else tau
    return gamma * M * growth + gamma * np.exp(beta * tau) * xi_sup


@dataclass
class PriorBoundReport:
    envelope_excess: float  # max over nodes of |Y| - envelope (<= 0 means pass)
    literal_excess: float  # same with the unmodified gamma prefactor; logged only
    norms: NormReport
    u_bound_ok: bool
    bmo_finite: bool
    measured_C: float
    M: float

    @property
    def envelope_ok(self) -> bool:
        return self.envelope_excess <= TOL

    @property
    def literal_ok(self) -> bool:
        return self.literal_excess <= TOL

    @property
    def passed(self) -> bool:
        return self.envelope_ok and self.u_bound_ok and self.bmo_finite

    def rows(self, trial="0") -> list:
        n = self.norms
        return [
            _row(trial, "prior_envelope", self.envelope_excess, 0.0, self.envelope_ok),
            _row(trial, "prior_envelope_literal", self.literal_excess, 0.0, True),
            _row(trial, "u_linf_vs_2y", n.linf_nu, 2 * n.s_inf, self.u_bound_ok),
            _row(trial, "bmo_finite", max(n.h2_bmo, n.j2_bmo), math.inf, self.bmo_finite),
        ]

    def to_dict(self) -> dict:
        return {
            "envelope_excess": self.envelope_excess,
            "literal_excess": self.literal_excess,
            "envelope_ok": self.envelope_ok,
            "literal_ok": self.literal_ok,
            "u_bound_ok": self.u_bound_ok,
            "bmo_finite": self.bmo_finite,
            "measured_C": self.measured_C,
            "M": self.M,
            "norms": self.norms.to_dict(),
        }


def prior_bound_check(model: LatticeModel, g: Generator, triple: SolutionTriple, xi,
                      M: float | None = None) -> PriorBoundReport:
    """Check the S-infinity envelope and the BMO conclusions on a solved triple.

    ``M`` bounds |g(0,0,0)| + alpha; by default it is read off the generator's
    node values. The envelope uses max(gamma, 1) as prefactor.
    """
    xi = stack_terminal(xi, model)
    p = g.params
    if M is None:
        M = max(
            (float(np.max(np.abs(g.g0(k, model.nodes(k))) + g.alpha_values(k, model.nodes(k))))
             for k in range(model.N)),
            default=0.0,
        )
    xi_sup = float(np.max(np.abs(xi)))
    env = envelope_profile(model, max(p.gamma, 1.0), p.beta, M, xi_sup)
    lit = envelope_profile(model, p.gamma, p.beta, M, xi_sup)
    ymax = np.array([float(np.max(np.abs(y))) for y in triple.Y])
    norms = compute_norms(model, triple)
    finite = all(math.isfinite(v) for v in (norms.h2_bmo, norms.j2_bmo, norms.linf_nu, norms.s_inf))
    scale = 1.0 + math.exp(min(4 * p.gamma * norms.s_inf, 700.0))
    return PriorBoundReport(
        envelope_excess=float(np.max(ymax - env)),
        literal_excess=float(np.max(ymax - lit)),
        norms=norms,
        u_bound_ok=norms.linf_nu <= 2 * norms.s_inf + TOL,
        bmo_finite=finite,
        measured_C=max(norms.h2_bmo, norms.j2_bmo) / scale,
        M=M,
    )


# ---- output --------------------------------------------------------------------


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def write_csv(path, rows: list, columns=CSV_COLUMNS) -> Path:
    """Write rows (dicts) with a header and 17-significant-digit floats."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([format_value(r.get(c, "")) for c in columns])
    return path
