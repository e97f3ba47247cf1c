"""Backward-induction solver, Picard fixed point and the splitting algorithm.

The discrete equation at a node of step k is

    Y_k = E_k[Y_{k+1}] + h g_k(Y_k, Z_k, U_k)        (implicit)
    Y_k = E_k[Y_{k+1}] + h g_k(E_k[Y_{k+1}], Z_k, U_k)   (explicit)

with (Z_k, U_k) the L2(P) projection of Y_{k+1} - E_k[Y_{k+1}] onto the
Brownian and compensated jump increments. When a measure change is supplied,
E_k is taken under Q while (Z, U) stay defined by the P-projection; the P
residual has zero Q-mean because every Doleans weight lies in the span of the
basis, so this is the same decomposition seen under Q.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    ConvergenceError,
    PicardDivergence,
    PreconditionError,
    QBSDEJError,
    StageError,
)
from .generators import Generator, girsanov_reduce, shift_generator
from .lattice import LatticeModel, ProbabilityWeights, doleans_exponential, stack_terminal
from .norms import compute_norms

# 2670 and 15 are the constants of the small-terminal-condition contraction
BALL_CONSTANT = 2670.0
XI_CONSTANT = 15.0
CONTINUOUS_CONTRACTION = 16.0 / 267.0
IMPLICIT_MAX_ITERS = 100
SPLIT_SLACK = 1e-12


class XiBoundWarning(UserWarning):
    """Terminal condition exceeds the small-terminal-condition threshold."""


@dataclass
class SolutionTriple:
    Y: list
    Z: list
    U: list
    representation_residual: list = field(default_factory=list)
    equation_residual: list = field(default_factory=list)

    @property
    def y0(self) -> float:
        return float(self.Y[0][0])

    @classmethod
    def zeros(cls, model: LatticeModel) -> "SolutionTriple":
        return cls(
            [np.zeros(model.n_nodes(k)) for k in range(model.N + 1)],
            [np.zeros((model.n_nodes(k), model.d)) for k in range(model.N)],
            [np.zeros((model.n_nodes(k), model.m)) for k in range(model.N)],
        )

    def __add__(self, other: "SolutionTriple") -> "SolutionTriple":
        return SolutionTriple(
            [a + b for a, b in zip(self.Y, other.Y)],
            [a + b for a, b in zip(self.Z, other.Z)],
            [a + b for a, b in zip(self.U, other.U)],
        )

    def __sub__(self, other: "SolutionTriple") -> "SolutionTriple":
        return SolutionTriple(
            [a - b for a, b in zip(self.Y, other.Y)],
            [a - b for a, b in zip(self.Z, other.Z)],
            [a - b for a, b in zip(self.U, other.U)],
        )

    def max_abs_diff(self, other: "SolutionTriple") -> float:
        diffs = [0.0]
        for xs, ys in ((self.Y, other.Y), (self.Z, other.Z), (self.U, other.U)):
            diffs += [float(np.max(np.abs(a - b), initial=0.0)) for a, b in zip(xs, ys)]
        return max(diffs)


@dataclass(frozen=True)
class PicardConfig:
    max_iters: int = 200
    tol: float = 1e-12
    D: float = 1.0
    scheme: str = "implicit"

    @staticmethod
    def eta(params) -> float:
        return 2.0 * params.c_lip

    @staticmethod
    def radius(params, T: float) -> float:
        """R = 1 / (2 sqrt(2670) mu e^{eta T})."""
        return 1.0 / (2.0 * math.sqrt(BALL_CONSTANT) * params.mu * math.exp(2.0 * params.c_lip * T))

    @staticmethod
    def xi_bound(params, T: float) -> float:
        """1 / (2 sqrt(15) sqrt(2670) mu e^{(3/2) C T})."""
        return 1.0 / (
            2.0 * math.sqrt(XI_CONSTANT) * math.sqrt(BALL_CONSTANT) * params.mu
            * math.exp(1.5 * params.c_lip * T)
        )


# ---- one backward sweep ----------------------------------------------------------


def _implicit_step(g, k, nodes, m, z, u, h, tol=1e-14, max_iters=IMPLICIT_MAX_ITERS):
    """Solve y = m + h g(y, z, u) node-wise by safeguarded secant iteration."""
    y0 = m.copy()
    F0 = y0 - m - h * g(k, nodes, y0, z, u)
    y1 = y0 - F0
    F1 = y1 - m - h * g(k, nodes, y1, z, u)
    for _ in range(max_iters):
        done = np.abs(F1) <= tol * (1.0 + np.abs(y1))
        if done.all():
            return y1, F1
        den = F1 - F0
        ok = np.abs(den) > 1e-300
        slope = np.where(ok, den / np.where(ok, y1 - y0, 1.0), 1.0)
        # F' lies in [1 - hC, 1 + hC]; fall back to a fixed-point step otherwise
        slope = np.where((slope > 1e-3) & np.isfinite(slope), slope, 1.0)
        y2 = np.where(done, y1, y1 - F1 / slope)
        y0, F0 = y1, F1
        y1 = y2
        F1 = y1 - m - h * g(k, nodes, y1, z, u)
    bad = ~(np.abs(F1) <= tol * (1.0 + np.abs(y1)))  # NaN counts as unconverged
    if bad.any():
        raise ConvergenceError(k, int(np.argmax(bad)), max_iters)
    return y1, F1


def _backward(model: LatticeModel, g: Generator, xi, scheme="implicit", weights=None, frozen=None) -> SolutionTriple:
    if scheme not in ("implicit", "explicit"):
        raise PreconditionError(f"unknown scheme {scheme!r}")
    if scheme == "implicit" and model.h * g.params.c_lip >= 1.0:
        raise PreconditionError(
            f"implicit scheme needs h*C < 1, got {model.h * g.params.c_lip}"
        )
    xi = stack_terminal(xi, model)
    N, h = model.N, model.h
    Y = [None] * (N + 1)
    Z, U, R, E = [None] * N, [None] * N, [None] * N, [None] * N
    Y[N] = xi
    for k in reversed(range(N)):
        nodes = model.nodes(k)
        mean, z, u, r = model.represent(k, Y[k + 1])
        m = mean if weights is None else model.expect(k, Y[k + 1], weights)
        zz, uu = (z, u) if frozen is None else (frozen.Z[k], frozen.U[k])
        if scheme == "explicit":
            Y[k] = m + h * g(k, nodes, m, zz, uu)
            E[k] = np.zeros_like(m)
        else:
            Y[k], E[k] = _implicit_step(g, k, nodes, m, zz, uu, h)
        Z[k], U[k], R[k] = z, u, r
    return SolutionTriple(Y, Z, U, R, E)


def solve_exact(model: LatticeModel, g: Generator, xi, scheme: str = "implicit",
                weights: ProbabilityWeights | None = None) -> SolutionTriple:
    """Exact backward induction on the lattice (the desk-scale oracle)."""
    return _backward(model, g, xi, scheme, weights)


def picard_map(model: LatticeModel, g: Generator, xi, inp: SolutionTriple,
               weights: ProbabilityWeights | None = None, scheme: str = "implicit") -> SolutionTriple:
    """Solve the equation with the generator frozen at the input's (z, u)."""
    return _backward(model, g, xi, scheme, weights, frozen=inp)


# ---- residual audit ------------------------------------------------------------


@dataclass
class ResidualReport:
    equation: list
    representation: list
    terminal: float

    @property
    def max_equation(self) -> float:
        return max(float(np.max(np.abs(e), initial=0.0)) for e in self.equation)

    @property
    def max_representation(self) -> float:
        return max(float(np.max(r, initial=0.0)) for r in self.representation)

    @property
    def max_defect(self) -> float:
        return max(self.max_equation, self.max_representation, self.terminal)


def residual(model: LatticeModel, g: Generator, triple: SolutionTriple, xi,
             scheme: str = "implicit", weights: ProbabilityWeights | None = None) -> ResidualReport:
    """Defect of each node in the one-step relation plus the (Z, U) projection defect."""
    xi = stack_terminal(xi, model)
    eq, rep = [], []
    for k in range(model.N):
        nodes = model.nodes(k)
        mean, z, u, _ = model.represent(k, triple.Y[k + 1])
        m = mean if weights is None else model.expect(k, triple.Y[k + 1], weights)
        Zk, Uk = np.asarray(triple.Z[k]), np.asarray(triple.U[k])
        yarg = triple.Y[k] if scheme == "implicit" else m
        eq.append(triple.Y[k] - m - model.h * g(k, nodes, yarg, Zk, Uk))
        dz = np.abs(Zk - z).max(axis=1, initial=0.0)
        du = np.abs(Uk - u).max(axis=1, initial=0.0)
        rep.append(np.maximum(dz, du))
    term = float(np.max(np.abs(triple.Y[model.N] - xi)))
    return ResidualReport(eq, rep, term)


def assemble(model: LatticeModel, g: Generator, Y, Z, U, xi, weights=None) -> SolutionTriple:
    """Wrap (Y, Z, U) into a triple with freshly computed residuals."""
    R = [model.represent(k, Y[k + 1])[3] for k in range(model.N)]
    t = SolutionTriple(list(Y), list(Z), list(U), R, [])
    t.equation_residual = residual(model, g, t, xi, weights=weights).equation
    return t


# ---- nonzero g(0,0,0) ------------------------------------------------------------


def g0_integral(model: LatticeModel, g: Generator) -> list:
    """Adapted process G_k = sum_{i<k} h g_i(0,0,0) along the path."""
    G = [np.zeros(1)]
    for k in range(model.N):
        g0 = g.g0(k, model.nodes(k))
        G.append(model.push_forward(G[k], k, (model.h * g0)[:, None]))
    return G


def has_g0(model: LatticeModel, g: Generator, tol: float = 0.0) -> bool:
    return any(np.max(np.abs(g.g0(k, model.nodes(k)))) > tol for k in range(model.N))


def shift_g0(model: LatticeModel, g: Generator, xi):
    """Remove g(0,0,0): returns (g_tilde, xi_bar, back_map).

    g_tilde_k(y, z, u) = g_k(y - G_k, z, u) - g_k(0, 0, 0) and xi_bar = xi + G_N,
    where G is the running integral of g(0,0,0). back_map subtracts G from Y.
    """
    xi = stack_terminal(xi, model)
    G = g0_integral(model, g)

    def f(k, nodes, y, z, u):
        return g(k, nodes, y - G[k][nodes], z, u) - g.g0(k, nodes)

    def gz(k, nodes, y, z, u):
        return g.dz(k, nodes, y - G[k][nodes], z, u)

    def gu(k, nodes, y, z, u):
        return g.du(k, nodes, y - G[k][nodes], z, u)

    gt = replace(g, func=f, grad_z=gz, grad_u=gu, name=f"g0-shifted({g.name})")

    def back_map(t: SolutionTriple) -> SolutionTriple:
        return SolutionTriple(
            [y - Gk for y, Gk in zip(t.Y, G)], t.Z, t.U,
            t.representation_residual, t.equation_residual,
        )

    return gt, xi + G[model.N], back_map


# ---- Picard iteration ------------------------------------------------------------


@dataclass
class PicardTrace:
    distances: list
    ball_values: list
    radius: float
    xi_bound: float
    xi_norm: float
    exceeds_bound: bool
    converged: bool = False
    shifted_g0: bool = False

    @property
    def iterations(self) -> int:
        """Productive iterations; the last map application only confirms the fixed point."""
        return max(len(self.distances) - 1, 0) if self.converged else len(self.distances)

    @property
    def ratios(self) -> list:
        d = self.distances
        return [d[i] / d[i - 1] for i in range(1, len(d)) if d[i - 1] > 0]

    @property
    def measured_ratio(self) -> float:
        r = self.ratios
        return max(r) if r else 0.0

    @property
    def in_ball(self) -> bool:
        return all(b <= self.radius**2 for b in self.ball_values)

    @property
    def monotone(self) -> bool:
        d = self.distances
        return all(d[i] <= d[i - 1] for i in range(1, len(d)))

    @property
    def final_distance(self) -> float:
        return self.distances[-1] if self.distances else math.inf

    def to_dict(self) -> dict:
        return {
            "distances": self.distances,
            "ball_values": self.ball_values,
            "radius": self.radius,
            "xi_bound": self.xi_bound,
            "xi_norm": self.xi_norm,
            "exceeds_bound": self.exceeds_bound,
            "converged": self.converged,
            "iterations": self.iterations,
            "measured_ratio": self.measured_ratio,
            "in_ball": self.in_ball,
            "shifted_g0": self.shifted_g0,
        }


def picard_solve(model: LatticeModel, g: Generator, xi, config: PicardConfig | None = None,
                 weights: ProbabilityWeights | None = None):
    """Iterate the frozen-generator map from (0, 0, 0) until successive iterates agree.

    Distances are sqrt of the ball norm of the difference of successive
    iterates. Returns ``(triple, trace)``; raises PicardDivergence with the trace
    when max_iters is reached or the iterates blow up.
    """
    cfg = config or PicardConfig()
    xi = stack_terminal(xi, model)
    p = g.params
    R = PicardConfig.radius(p, model.T)
    bound = PicardConfig.xi_bound(p, model.T)

    back = None
    xi_norm = float(np.max(np.abs(xi)))
    size = xi_norm
    if has_g0(model, g):
        G = g0_integral(model, g)
        size = xi_norm + cfg.D * float(np.max(np.abs(G[model.N])))
        g, xi, back = shift_g0(model, g, xi)
    trace = PicardTrace([], [], R, bound, xi_norm, size > bound, shifted_g0=back is not None)
    if trace.exceeds_bound:
        warnings.warn(
            f"terminal size {size:.4g} exceeds the contraction threshold {bound:.4g}",
            XiBoundWarning, stacklevel=2,
        )

    cur = SolutionTriple.zeros(model)
    for _ in range(cfg.max_iters):
        nxt = picard_map(model, g, xi, cur, weights, cfg.scheme)
        dist = math.sqrt(compute_norms(model, nxt - cur, weights).ball)
        trace.distances.append(dist)
        trace.ball_values.append(compute_norms(model, nxt, weights).ball)
        cur = nxt
        if not math.isfinite(dist) or dist > 1e150:
            raise PicardDivergence("Picard iterates blew up", trace)
        if dist < cfg.tol:
            trace.converged = True
            break
    if not trace.converged:
        raise PicardDivergence(
            f"no convergence in {cfg.max_iters} iterations "
            f"(last distance {trace.final_distance:.3e})", trace,
        )
    if back is not None:
        cur = back(cur)
    return cur, trace


# ---- splitting and pasting ---------------------------------------------------------


@dataclass
class SplitPlan:
    n: int
    pieces: list

    @property
    def total(self) -> np.ndarray:
        """Running left-to-right sum of the pieces (equals xi exactly)."""
        acc = np.zeros_like(self.pieces[0])
        for p in self.pieces:
            acc = acc + p
        return acc


def split_terminal(xi, xi_bound: float) -> SplitPlan:
    """Split xi into n = ceil(|xi|_inf / xi_bound) near-equal pieces.

    The last piece absorbs the rounding so that the pieces telescope back to xi.
    Pieces are bounded by xi_bound up to a relative slack of 1e-12.
    """
    xi = np.asarray(xi, dtype=float)
    sup = float(np.max(np.abs(xi))) if xi.size else 0.0
    # the threshold and the running sum are rounded; allow a 1e-12 relative slack
    cap = xi_bound * (1 + SPLIT_SLACK)
    n = max(1, math.ceil(sup / cap)) if sup > 0 else 1
    while True:
        if n == 1:
            return SplitPlan(1, [xi.copy()])
        base = xi / n
        head = np.zeros_like(xi)
        for _ in range(n - 1):
            head = head + base
        # head lies within a factor 2 of xi, so xi - head is exact and the
        # running sum of the pieces reproduces xi bit for bit
        last = xi - head
        if max(float(np.max(np.abs(last))), float(np.max(np.abs(base)))) <= cap:
            return SplitPlan(n, [base.copy() for _ in range(n - 1)] + [last])
        n += 1


@dataclass
class StageReport:
    n: int
    xi_bound: float
    stages: list = field(default_factory=list)
    max_residual: float = math.nan
    shifted_g0: bool = False

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "xi_bound": self.xi_bound,
            "stages": self.stages,
            "max_residual": self.max_residual,
            "shifted_g0": self.shifted_g0,
        }


def _derivative_fields(model: LatticeModel, g: Generator, accum: SolutionTriple):
    phi, psi = [], []
    for k in range(model.N):
        nodes = model.nodes(k)
        args = (k, nodes, accum.Y[k], accum.Z[k], accum.U[k])
        phi.append(g.dz(*args))
        psi.append(model.to_discrete_density(g.du(*args)) if model.m else np.zeros((len(nodes), 0)))
    return phi, psi


def solve_general(model: LatticeModel, g: Generator, xi, config: PicardConfig | None = None):
    """Existence by splitting: solve small pieces of xi stage by stage and sum.

    Stage i shifts g by the running sum of earlier stages, removes the first
    order (z, u) part at that sum by a Doleans-Dade change of measure, and runs
    the Picard fixed point on the piece xi_i under the new measure.
    """
    cfg = config or PicardConfig()
    xi = stack_terminal(xi, model)
    if has_g0(model, g):
        gt, xib, back = shift_g0(model, g, xi)
        triple, report = solve_general(model, gt, xib, cfg)
        report.shifted_g0 = True
        out = back(triple)
        out = assemble(model, g, out.Y, out.Z, out.U, xi)
        report.max_residual = residual(model, g, out, xi).max_defect
        return out, report

    bound = PicardConfig.xi_bound(g.params, model.T)
    plan = split_terminal(xi, bound)
    report = StageReport(plan.n, bound)
    accum = SolutionTriple.zeros(model)
    for i, piece in enumerate(plan.pieces, start=1):
        try:
            gi = shift_generator(g, accum)
            phi, psi = _derivative_fields(model, g, accum)
            weights = doleans_exponential(model, phi, psi)
            gbar = girsanov_reduce(gi, phi, psi, nu=model.nu)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", XiBoundWarning)
                stage, trace = picard_solve(model, gbar, piece, cfg, weights)
        except QBSDEJError as exc:
            raise StageError(i, exc) from exc
        accum = accum + stage
        report.stages.append({
            "stage": i,
            "xi_sup": float(np.max(np.abs(piece))),
            "iterations": trace.iterations,
            "final_distance": trace.final_distance,
            "measured_ratio": trace.measured_ratio,
            "in_ball": trace.in_ball,
            "min_weight": weights.min_weight,
            "stage_ball": compute_norms(model, stage).ball,
        })
    out = assemble(model, g, accum.Y, accum.Z, accum.U, xi)
    report.max_residual = residual(model, g, out, xi).max_defect
    return out, report
