"""Generators g(t, omega, y, z, u), their structural constants and transforms.

A generator is evaluated vectorised over the nodes of one step::

    g(k, nodes, y, z, u)   # y (n,), z (n, d), u (n, m)  ->  (n,)

``u[:, j]`` is the mark function evaluated at mark ``x_j``. Derivatives in ``u``
are Frechet derivatives against the compensator, i.e. ``(dg/du_j) / lambda_j``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional

import numpy as np

from .errors import ConfigurationError, PreconditionError
from .lattice import MarkSpace

GenFn = Callable[[int, np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class GeneratorParams:
    """Structural constants of a generator.

    beta, gamma: quadratic-growth envelope. c_lip: Lipschitz constant in y.
    mu: local Lipschitz constant in (z, u). m_alpha: bound on alpha and |g(0,0,0)|.
    theta, delta, c1, c2, r_bar, m_bar: derivative bounds used by the splitting
    construction (r_bar and m_bar are constant bounds on r_t and m_t).
    """

    beta: float = 0.0
    gamma: float = 1.0
    c_lip: float = 0.0
    mu: float = 1.0
    m_alpha: float = 0.0
    theta: float = 1.0
    delta: float = 0.5
    c1: float = -0.5
    c2: float = 1.0
    r_bar: float = 0.0
    m_bar: float = 0.0

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            if not math.isfinite(getattr(self, name)):
                raise ConfigurationError(f"generator constant {name} must be finite")
        if self.gamma <= 0:
            raise ConfigurationError("gamma must be > 0")
        if self.delta <= 0:
            raise ConfigurationError("delta must be > 0")
        if self.c1 < -1 + self.delta:
            raise ConfigurationError(f"c1 = {self.c1} must be >= -1 + delta = {-1 + self.delta}")
        if self.c2 < 0:
            raise ConfigurationError("c2 must be >= 0")
        if self.beta < 0 or self.c_lip < 0 or self.mu <= 0 or self.m_alpha < 0:
            raise ConfigurationError("beta, c_lip, m_alpha must be >= 0 and mu > 0")


_SERIES_CUTOFF = 0.1
_SERIES = 1.0 / np.array([math.factorial(n) for n in range(2, 14)])


def exp_remainder(v):
    """e^v - 1 - v without cancellation for small |v|."""
    v = np.asarray(v, dtype=float)
    small = np.abs(v) < _SERIES_CUTOFF
    vs = np.where(small, v, 0.0)
    # Horner on v^2 (1/2! + v/3! + ...)
    acc = np.zeros_like(vs)
    for c in _SERIES[::-1]:
        acc = acc * vs + c
    return np.where(small, vs * vs * acc, np.expm1(v) - v)


def j_eval(marks, u) -> np.ndarray | float:
    """sum_j lambda_j (e^{u_j} - 1 - u_j) over the last axis of ``u``.

    ``marks`` is a MarkSpace or an array of intensities.
    """
    lam = marks.lam if isinstance(marks, MarkSpace) else np.asarray(marks, dtype=float)
    u = np.asarray(u, dtype=float)
    val = np.sum(lam * exp_remainder(u), axis=-1)
    return float(val) if np.ndim(val) == 0 else val


def h_eval(eta: float, x):
    """(e^{eta x} - 1 - eta x) / eta."""
    if eta == 0:
        raise ValueError("h_eta is undefined for eta = 0")
    x = np.asarray(x, dtype=float)
    val = exp_remainder(eta * x) / eta
    return float(val) if val.ndim == 0 else val


def _as_batch(y, z, u, d, m):
    y = np.atleast_1d(np.asarray(y, dtype=float))
    n = y.shape[0]
    z = np.broadcast_to(np.asarray(z, dtype=float), (n, d)) if d else np.zeros((n, 0))
    u = np.broadcast_to(np.asarray(u, dtype=float), (n, m)) if m else np.zeros((n, 0))
    return y, z, u


@dataclass(frozen=True)
class Generator:
    """A driver with its declared constants and optional analytic gradients."""

    func: GenFn
    params: GeneratorParams
    marks: MarkSpace
    d: int = 1
    grad_z: Optional[GenFn] = None
    grad_u: Optional[GenFn] = None
    alpha: Optional[Callable[[int, np.ndarray], np.ndarray]] = None
    name: str = "custom"
    fd_step: float = 1e-5

    @property
    def m(self) -> int:
        return self.marks.size

    @property
    def lam(self) -> np.ndarray:
        return self.marks.lam

    def __call__(self, k, nodes, y, z, u) -> np.ndarray:
        return np.asarray(self.func(k, nodes, y, z, u), dtype=float)

    def value(self, y, z=0.0, u=0.0, k: int = 0, node: int = 0) -> float:
        """Scalar evaluation at a single (step, node)."""
        yb, zb, ub = _as_batch(y, z, u, self.d, self.m)
        return float(self(k, np.array([node]), yb, zb, ub)[0])

    def g0(self, k, nodes) -> np.ndarray:
        n = len(nodes)
        return self(k, nodes, np.zeros(n), np.zeros((n, self.d)), np.zeros((n, self.m)))

    def alpha_values(self, k, nodes) -> np.ndarray:
        if self.alpha is None:
            return np.full(len(nodes), self.params.m_alpha)
        return np.broadcast_to(np.asarray(self.alpha(k, nodes), dtype=float), (len(nodes),))

    def dz(self, k, nodes, y, z, u) -> np.ndarray:
        if self.grad_z is not None:
            return np.asarray(self.grad_z(k, nodes, y, z, u), dtype=float).reshape(len(y), self.d)
        return self.numeric_dz(k, nodes, y, z, u)

    def du(self, k, nodes, y, z, u) -> np.ndarray:
        if self.grad_u is not None:
            return np.asarray(self.grad_u(k, nodes, y, z, u), dtype=float).reshape(len(y), self.m)
        return self.numeric_du(k, nodes, y, z, u)

    def numeric_dz(self, k, nodes, y, z, u) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        out = np.zeros((len(y), self.d))
        for i in range(self.d):
            step = self.fd_step * np.maximum(1.0, np.abs(z[:, i]))
            e = np.zeros_like(z)
            e[:, i] = step
            out[:, i] = (self(k, nodes, y, z + e, u) - self(k, nodes, y, z - e, u)) / (2 * step)
        return out

    def numeric_du(self, k, nodes, y, z, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        out = np.zeros((len(y), self.m))
        for j in range(self.m):
            step = self.fd_step * np.maximum(1.0, np.abs(u[:, j]))
            e = np.zeros_like(u)
            e[:, j] = step
            out[:, j] = (self(k, nodes, y, z, u + e) - self(k, nodes, y, z, u - e)) / (
                2 * step * self.lam[j]
            )
        return out

    def with_params(self, **changes) -> "Generator":
        return replace(self, params=replace(self.params, **changes))


# ---- built-in families ------------------------------------------------------


def entropic(gamma: float, marks: MarkSpace, d: int = 1, **params) -> Generator:
    """(gamma/2)|z|^2 + j(gamma u)/gamma; solves to (1/gamma) ln E_t[e^{gamma xi}]."""
    if gamma <= 0:
        raise ConfigurationError("entropic generator needs gamma > 0")
    lam = marks.lam

    def f(k, nodes, y, z, u):
        return 0.5 * gamma * np.sum(z * z, axis=-1) + np.sum(
            lam * exp_remainder(gamma * u), axis=-1
        ) / gamma

    def gz(k, nodes, y, z, u):
        return gamma * np.asarray(z, dtype=float)

    def gu(k, nodes, y, z, u):
        return np.expm1(gamma * np.asarray(u, dtype=float))

    defaults = dict(gamma=gamma, beta=0.0, c_lip=0.0, mu=gamma, theta=gamma)
    defaults.update(params)
    return Generator(f, GeneratorParams(**defaults), marks, d, gz, gu, name="entropic")


def linear_alpha(lam, coef, gamma: float, b=None) -> float:
    """Smallest alpha putting b.z + sum_j coef_j lambda_j u_j under the growth envelope.

    sup_z [b.z - (gamma/2)|z|^2] = |b|^2 / (2 gamma) and, per mark,
    sup_u [c lambda u - j(gamma u)/gamma] = lambda ((1+c) ln(1+c) - c) / gamma (c > -1).
    The lower side gives the same values.
    """
    coef = np.asarray(coef, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if (coef <= -1).any():
        return math.inf
    jump = float(np.sum(lam * (np.log1p(coef) * (1 + coef) - coef))) / gamma
    quad = 0.0 if b is None else float(np.sum(np.asarray(b, dtype=float) ** 2)) / (2 * gamma)
    return jump + quad


def linear(a: float, b, c, marks: MarkSpace, d: int = 1, **params) -> Generator:
    """a*y + b.z + sum_j c_j lambda_j u_j."""
    b = np.broadcast_to(np.asarray(b, dtype=float), (d,)).copy()
    c = np.broadcast_to(np.asarray(c, dtype=float), (marks.size,)).copy()
    lam = marks.lam

    def f(k, nodes, y, z, u):
        return a * y + z @ b + u @ (c * lam)

    def gz(k, nodes, y, z, u):
        return np.broadcast_to(b, (len(y), d))

    def gu(k, nodes, y, z, u):
        return np.broadcast_to(c, (len(y), marks.size))

    defaults = dict(beta=abs(a), c_lip=abs(a), gamma=1.0, theta=1.0,
                    r_bar=float(np.linalg.norm(b)), m_bar=float(np.abs(c).max(initial=0.0)))
    gamma = float(params.get("gamma", 1.0))
    alpha = linear_alpha(lam, c, gamma, b)
    if math.isfinite(alpha):
        defaults["m_alpha"] = alpha
    if marks.size:
        c1 = min(-0.5, float(c.min()))
        defaults.update(c1=c1, c2=max(1.0, float(c.max())), delta=max(1e-6, min(0.5, 1 + c1)))
    defaults.update(params)
    return Generator(f, GeneratorParams(**defaults), marks, d, gz, gu, name="linear")


def royer(
    gamma: float,
    jump_coef,
    marks: MarkSpace,
    d: int = 1,
    a: float = 0.0,
    c0: float = 0.0,
    c1: float = -0.5,
    c2: float = 1.0,
    **params,
) -> Generator:
    """Royer-type family: a*y + c0 + (gamma/2)|z|^2 + sum_j gh_j lambda_j u_j.

    The jump coefficients must satisfy c1 (1 ^ |x_j|) <= gh_j <= c2 (1 ^ |x_j|).
    """
    gh = np.broadcast_to(np.asarray(jump_coef, dtype=float), (marks.size,)).copy()
    cap = np.minimum(1.0, np.abs(marks.x))
    if ((gh < c1 * cap - 1e-15) | (gh > c2 * cap + 1e-15)).any():
        raise ConfigurationError(
            f"jump coefficients {gh.tolist()} violate {c1}(1^|x|) <= . <= {c2}(1^|x|)"
        )
    lam = marks.lam

    def f(k, nodes, y, z, u):
        return a * y + c0 + 0.5 * gamma * np.sum(z * z, axis=-1) + u @ (gh * lam)

    def gz(k, nodes, y, z, u):
        return gamma * np.asarray(z, dtype=float)

    def gu(k, nodes, y, z, u):
        return np.broadcast_to(gh, (len(y), marks.size))

    # the linear jump term sits under the j-envelope only up to a constant alpha
    alpha = linear_alpha(lam, gh, gamma)
    defaults = dict(gamma=gamma, beta=abs(a), c_lip=abs(a), mu=max(gamma, 1e-12),
                    m_alpha=max(abs(c0), alpha), theta=gamma, c1=c1, c2=c2,
                    delta=max(1e-6, min(0.5, 1 + c1)))
    defaults.update(params)
    return Generator(f, GeneratorParams(**defaults), marks, d, gz, gu, name="royer",
                     alpha=lambda k, nodes: np.full(len(nodes), alpha))


def zero(marks: MarkSpace, d: int = 1) -> Generator:
    def f(k, nodes, y, z, u):
        return np.zeros(len(y))

    def gz(k, nodes, y, z, u):
        return np.zeros((len(y), d))

    def gu(k, nodes, y, z, u):
        return np.zeros((len(y), marks.size))

    return Generator(f, GeneratorParams(), marks, d, gz, gu, name="zero")


BUILTINS = ("entropic", "linear", "royer", "zero")


def make_builtin(spec: dict, marks: MarkSpace, d: int = 1) -> Generator:
    """Build a generator from a JSON-style dict, e.g. {"kind": "entropic", "gamma": 1}."""
    spec = dict(spec)
    kind = spec.pop("kind", None)
    overrides = spec.pop("params", {}) or {}
    if kind == "entropic":
        return entropic(float(spec["gamma"]), marks, d, **overrides)
    if kind == "linear":
        return linear(float(spec.get("a", 0.0)), spec.get("b", 0.0), spec.get("c", 0.0),
                      marks, d, **overrides)
    if kind == "royer":
        return royer(
            float(spec["gamma"]), spec.get("jump_coef", 0.0), marks, d,
            a=float(spec.get("a", 0.0)), c0=float(spec.get("c0", 0.0)),
            c1=float(spec.get("c1", -0.5)), c2=float(spec.get("c2", 1.0)), **overrides,
        )
    if kind == "zero":
        return zero(marks, d)
    raise ConfigurationError(f"unknown generator kind {kind!r}; expected one of {BUILTINS}")


def eval_builtin(kind: str, params: dict, step: int, node: int, y, z, u, marks: MarkSpace, d: int = 1) -> float:
    return make_builtin({"kind": kind, **params}, marks, d).value(y, z, u, k=step, node=node)


# ---- assumption checkers ------------------------------------------------------


@dataclass
class EnvelopeReport:
    upper_slack: float
    lower_slack: float
    worst_upper: tuple
    worst_lower: tuple
    tol: float = 1e-10

    @property
    def passed(self) -> bool:
        return self.upper_slack >= -self.tol and self.lower_slack >= -self.tol


def _iter_samples(samples):
    for s in samples:
        k, node, y, z, u = s
        yield int(k), int(node), float(y), np.atleast_1d(np.asarray(z, float)), np.atleast_1d(np.asarray(u, float))


def envelope_check(g: Generator, samples: Iterable, tol: float = 1e-10) -> EnvelopeReport:
    """Check the two-sided quadratic-growth envelope on (k, node, y, z, u) samples.

    -alpha - beta|y| - (gamma/2)|z|^2 - j(-gamma u)/gamma <= g - g(0,0,0)
        <= alpha + beta|y| + (gamma/2)|z|^2 + j(gamma u)/gamma
    """
    p = g.params
    up, lo = math.inf, math.inf
    wu = wl = ()
    for k, node, y, z, u in _iter_samples(samples):
        nodes = np.array([node])
        diff = g.value(y, z, u, k, node) - float(g.g0(k, nodes)[0])
        a = float(g.alpha_values(k, nodes)[0])
        quad = 0.5 * p.gamma * float(z @ z) if g.d else 0.0
        jp = j_eval(g.lam, p.gamma * u) / p.gamma if g.m else 0.0
        jm = j_eval(g.lam, -p.gamma * u) / p.gamma if g.m else 0.0
        s_up = a + p.beta * abs(y) + quad + jp - diff
        s_lo = diff + a + p.beta * abs(y) + quad + jm
        if s_up < up:
            up, wu = s_up, (k, node, y, z.tolist(), u.tolist())
        if s_lo < lo:
            lo, wl = s_lo, (k, node, y, z.tolist(), u.tolist())
    return EnvelopeReport(up, lo, wu, wl, tol)


@dataclass
class GradientReport:
    max_dev_z: float
    max_dev_u: float
    max_hessian_z: float
    violations: list = field(default_factory=list)

    @property
    def max_deviation(self) -> float:
        return max(self.max_dev_z, self.max_dev_u)

    @property
    def passed(self) -> bool:
        return not self.violations


def gradient_check(g: Generator, samples: Iterable, step: float = 1e-5, tol: float = 1e-6) -> GradientReport:
    """Compare analytic gradients with central differences and check their bounds.

    Bounds: |D_z g| <= r_bar + theta|z|, |D^2_zz g| <= theta and
    c1 (1 ^ |x_j|) <= D_u g(x_j) <= c2 (1 ^ |x_j|).
    """
    p = g.params
    fd = replace(g, grad_z=None, grad_u=None, fd_step=step)
    cap = np.minimum(1.0, np.abs(g.marks.x))
    dev_z = dev_u = hess = 0.0
    viol = []
    for k, node, y, z, u in _iter_samples(samples):
        nodes = np.array([node])
        yb, zb, ub = np.array([y]), z[None, :].reshape(1, g.d), u[None, :].reshape(1, g.m)
        az, au = g.dz(k, nodes, yb, zb, ub)[0], g.du(k, nodes, yb, zb, ub)[0]
        nz, nu_ = fd.numeric_dz(k, nodes, yb, zb, ub)[0], fd.numeric_du(k, nodes, yb, zb, ub)[0]
        if g.d:
            dev_z = max(dev_z, float(np.abs(az - nz).max()))
        if g.m:
            dev_u = max(dev_u, float(np.abs(au - nu_).max()))
        sample = (k, node, y, z.tolist(), u.tolist())
        if g.d and np.linalg.norm(az) > p.r_bar + p.theta * np.linalg.norm(z) + tol:
            viol.append(("grad_z_bound", sample))
        # second differences of g along each z axis
        for i in range(g.d):
            s = 1e-3 * max(1.0, abs(z[i]))
            e = np.zeros(g.d)
            e[i] = s
            d2 = (g.value(y, z + e, u, k, node) - 2 * g.value(y, z, u, k, node)
                  + g.value(y, z - e, u, k, node)) / s**2
            hess = max(hess, abs(d2))
            if abs(d2) > p.theta + 1e-4 * max(1.0, p.theta):
                viol.append(("hessian_z_bound", sample))
        if g.m:
            if (au < p.c1 * cap - tol).any() or (au > p.c2 * cap + tol).any():
                viol.append(("grad_u_bound", sample))
    if dev_z > tol or dev_u > tol:
        viol.append(("gradient_mismatch", (dev_z, dev_u)))
    return GradientReport(dev_z, dev_u, hess, viol)


# ---- transforms -----------------------------------------------------------------


def girsanov_reduce(g: Generator, phi, psi, nu=None, check_floor: bool = True) -> Generator:
    """g(y,z,u) - phi.z - <psi, u>_nu.

    ``nu`` are the inner-product weights for the mark coordinates (default: the
    intensities). ``phi``/``psi`` are constants or per-step lists of arrays.
    """
    nu = g.lam if nu is None else np.asarray(nu, dtype=float)
    d, m = g.d, g.m
    if check_floor and g.m:
        arrs = psi if isinstance(psi, list) else [psi]
        lo = min((float(np.min(a)) for a in arrs if np.size(a)), default=0.0)
        if lo < -1 + g.params.delta - 1e-15:
            raise PreconditionError(
                f"psi minimum {lo} is below -1 + delta = {-1 + g.params.delta}"
            )

    def f(k, nodes, y, z, u):
        ph = _field_at(phi, k, nodes, d)
        ps = _field_at(psi, k, nodes, m)
        return g(k, nodes, y, z, u) - np.sum(ph * z, axis=-1) - np.sum(ps * nu * u, axis=-1)

    def gz(k, nodes, y, z, u):
        ph = _field_at(phi, k, nodes, d)
        return g.dz(k, nodes, y, z, u) - ph

    def gu(k, nodes, y, z, u):
        ps = _field_at(psi, k, nodes, m)
        return g.du(k, nodes, y, z, u) - ps * nu / g.lam

    return replace(g, func=f, grad_z=gz, grad_u=gu, name=f"reduced({g.name})")


def _field_at(value, k, nodes, dim) -> np.ndarray:
    if isinstance(value, list):
        arr = np.asarray(value[k], dtype=float)
        return np.broadcast_to(arr, (arr.shape[0], dim))[nodes]
    return np.broadcast_to(np.asarray(value, dtype=float), (len(nodes), dim))


def shift_generator(g: Generator, accum) -> Generator:
    """g(Ybar + y, Zbar + z, Ubar + u) - g(Ybar, Zbar, Ubar), node-wise.

    ``accum`` is any object with per-step ``Y``, ``Z``, ``U`` lists (normally a
    SolutionTriple holding the running sum of earlier stages).

    The shifted generator vanishes at the origin. Its envelope constants follow
    the pasting estimate: gamma -> 4 gamma, beta unchanged, and a node-wise alpha
    2 alpha + 2 beta|Ybar| + 3 gamma|Zbar|^2 + j-terms of Ubar.
    """
    p = g.params
    lam = g.lam
    Ybar, Zbar, Ubar = accum.Y, accum.Z, accum.U

    def at(k, nodes):
        return Ybar[k][nodes], Zbar[k][nodes], Ubar[k][nodes]

    def f(k, nodes, y, z, u):
        yb, zb, ub = at(k, nodes)
        return g(k, nodes, yb + y, zb + z, ub + u) - g(k, nodes, yb, zb, ub)

    def gz(k, nodes, y, z, u):
        yb, zb, ub = at(k, nodes)
        return g.dz(k, nodes, yb + y, zb + z, ub + u)

    def gu(k, nodes, y, z, u):
        yb, zb, ub = at(k, nodes)
        return g.du(k, nodes, yb + y, zb + z, ub + u)

    def alpha(k, nodes):
        # steps without Z/U (terminal) fall back to zero offsets
        yb = Ybar[k][nodes]
        zb = Zbar[k][nodes] if k < len(Zbar) else np.zeros((len(nodes), g.d))
        ub = Ubar[k][nodes] if k < len(Ubar) else np.zeros((len(nodes), g.m))
        ga = p.gamma
        jterm = 0.0
        if g.m:
            j1 = np.maximum(j_eval(lam, ga * ub), j_eval(lam, -ga * ub)) / ga
            j2 = np.maximum(j_eval(lam, 2 * ga * ub), j_eval(lam, -2 * ga * ub)) / (2 * ga)
            jterm = j1 + j2
        return (2 * g.alpha_values(k, nodes) + 2 * p.beta * np.abs(yb)
                + 3 * ga * np.sum(zb * zb, axis=-1) + jterm)

    m_alpha = max(float(np.max(alpha(k, np.arange(len(Zbar[k]))))) for k in range(len(Zbar))) if Zbar else p.m_alpha
    params = replace(p, gamma=4 * p.gamma, m_alpha=max(m_alpha, 0.0))
    return replace(g, func=f, grad_z=gz, grad_u=gu, alpha=alpha, params=params,
                   name=f"shifted({g.name})")
