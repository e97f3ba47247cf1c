"""Finite stochastic lattice for Brownian motion plus a finite-activity jump measure.

Each step draws a Rademacher increment ``+-sqrt(h)`` for every Brownian
dimension and an independent Bernoulli(``lambda_j h``) jump indicator for every
mark, giving ``2**(d+m)`` atoms per step. Conditional expectations are exact
finite sums over those atoms.

Two node layouts are supported:

``tree``
    one node per outcome history (no recombination); any path-dependent
    generator or terminal condition is representable. This is the default.
``recombining``
    one node per vector of counts (up-moves per Brownian dimension, jumps per
    mark). Only valid for generators and terminal conditions that depend on the
    path through the current state, but it makes long horizons tractable.

Nodes at step ``k`` are integers ``0 .. n_k - 1``; ``children(k)[i, a]`` is the
index at step ``k+1`` reached from node ``i`` through atom ``a``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import (
    BudgetError,
    ConfigurationError,
    IntensityStepError,
    MeasureChangeError,
    PreconditionError,
    StructuralError,
)

DEFAULT_BUDGET = 2**24
WEIGHT_FLOOR = 1e-9

# per-step arrays, index k holds the values at the nodes of step k
StepArrays = list


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    steps: int

    def __post_init__(self):
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ConfigurationError(f"horizon must be finite and > 0, got {self.horizon}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigurationError(f"steps must be an integer >= 1, got {self.steps}")

    @property
    def step(self) -> float:
        return self.horizon / self.steps

    def time(self, k: int) -> float:
        return k * self.step


@dataclass(frozen=True)
class MarkSpace:
    """Deterministic compensator ``sum_j lambda_j delta_{x_j}``."""

    values: tuple[float, ...] = ()
    intensities: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        object.__setattr__(self, "intensities", tuple(float(v) for v in self.intensities))
        if len(self.values) != len(self.intensities):
            raise ConfigurationError("marks and intensities must have the same length")
        if any(v == 0 or not math.isfinite(v) for v in self.values):
            raise ConfigurationError("mark values must be finite and nonzero")
        if len(set(self.values)) != len(self.values):
            raise ConfigurationError("mark values must be distinct")
        for j, lam in enumerate(self.intensities):
            if not (lam > 0 and math.isfinite(lam)):
                raise ConfigurationError(f"mark {j}: intensity must be > 0, got {lam}")

    @classmethod
    def empty(cls) -> "MarkSpace":
        return cls((), ())

    @property
    def size(self) -> int:
        return len(self.values)

    @property
    def lam(self) -> np.ndarray:
        return np.asarray(self.intensities, dtype=float)

    @property
    def x(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)


@dataclass
class ProbabilityWeights:
    """Doleans-Dade reweighting of the lattice.

    ``branch[k]`` has shape ``(n_k, A)``: the density increment on each branch.
    ``density[k]`` has shape ``(n_k,)``: dQ/dP restricted to the node.
    """

    branch: StepArrays
    density: StepArrays
    floor: float = WEIGHT_FLOOR

    @property
    def min_weight(self) -> float:
        return min(float(w.min()) for w in self.branch)


class LatticeModel:
    """Discrete filtered probability space. Immutable after construction."""

    def __init__(
        self,
        grid: TimeGrid,
        marks: MarkSpace | None = None,
        d: int = 1,
        layout: str = "tree",
        budget: int = DEFAULT_BUDGET,
    ):
        marks = marks if marks is not None else MarkSpace.empty()
        if int(d) != d or d < 0:
            raise ConfigurationError(f"d must be a nonnegative integer, got {d}")
        if d + marks.size == 0:
            raise ConfigurationError("need at least one Brownian dimension or one mark")
        if layout not in ("tree", "recombining"):
            raise ConfigurationError(f"unknown layout {layout!r}")
        h = grid.step
        for j, lam in enumerate(marks.intensities):
            if lam * h >= 1.0:
                raise IntensityStepError(j, lam, h)

        self.grid = grid
        self.marks = marks
        self.d = int(d)
        self.m = marks.size
        self.layout = layout
        self.h = h
        self.n_atoms = 2 ** (self.d + self.m)

        D = self.d + self.m
        N = grid.steps
        if layout == "tree":
            sizes = [self.n_atoms**k for k in range(N + 1)]
        else:
            sizes = [(k + 1) ** D for k in range(N + 1)]
        required = self.n_atoms * sum(sizes)
        if required > budget:
            raise BudgetError(required, budget)
        self.sizes = tuple(sizes)

        # atom a: bit i (< d) is the sign of Brownian dim i, bit d+j the jump of mark j
        bits = (np.arange(self.n_atoms)[:, None] >> np.arange(D)[None, :]) & 1
        self.atom_bits = bits
        sq = math.sqrt(h)
        self.dB = np.where(bits[:, : self.d] == 1, sq, -sq).astype(float)
        self.jump = bits[:, self.d :].astype(float)
        lam_h = marks.lam * h
        self.dmu = self.jump - lam_h[None, :]
        p_b = np.full((self.n_atoms,), 0.5**self.d)
        p_j = np.prod(np.where(self.jump == 1, lam_h[None, :], 1.0 - lam_h[None, :]), axis=1)
        self.prob = p_b * p_j
        # conditional variance of each compensated jump increment
        self.jump_var = lam_h * (1.0 - lam_h)

    # ---- construction helpers -------------------------------------------------

    @classmethod
    def from_dict(cls, spec: dict, budget: int = DEFAULT_BUDGET) -> "LatticeModel":
        marks = spec.get("marks", [])
        ms = MarkSpace(
            tuple(mk["x"] for mk in marks), tuple(mk["lambda"] for mk in marks)
        )
        return cls(
            TimeGrid(float(spec["T"]), int(spec["N"])),
            ms,
            d=int(spec.get("d", 1)),
            layout=spec.get("layout", "tree"),
            budget=budget,
        )

    @classmethod
    def from_json(cls, text: str, budget: int = DEFAULT_BUDGET) -> "LatticeModel":
        return cls.from_dict(json.loads(text), budget=budget)

    def to_dict(self) -> dict:
        return {
            "T": self.grid.horizon,
            "N": self.grid.steps,
            "d": self.d,
            "marks": [
                {"x": x, "lambda": lam}
                for x, lam in zip(self.marks.values, self.marks.intensities)
            ],
            "layout": self.layout,
        }

    # ---- structure ------------------------------------------------------------

    @property
    def N(self) -> int:
        return self.grid.steps

    @property
    def T(self) -> float:
        return self.grid.horizon

    @property
    def nu(self) -> np.ndarray:
        """Discrete compensator rates ``lambda_j (1 - lambda_j h)``.

        These are the weights of the inner product under which the lattice's
        compensated jump increments have variance ``nu_j h``.
        """
        return self.jump_var / self.h

    def n_nodes(self, k: int) -> int:
        return self.sizes[k]

    @property
    def total_nodes(self) -> int:
        return sum(self.sizes)

    def nodes(self, k: int) -> np.ndarray:
        return np.arange(self.sizes[k])

    def children(self, k: int) -> np.ndarray:
        """Child indices at step k+1, shape ``(n_k, A)``."""
        if not 0 <= k < self.N:
            raise StructuralError(f"step {k} has no children (N={self.N})")
        return self._children[k]

    @cached_property
    def _children(self) -> list:
        out = []
        A = self.n_atoms
        D = self.d + self.m
        for k in range(self.N):
            if self.layout == "tree":
                ch = np.arange(self.sizes[k])[:, None] * A + np.arange(A)[None, :]
            else:
                counts = self._counts(k)  # (n_k, D)
                nxt = counts[:, None, :] + self.atom_bits[None, :, :]
                base = k + 2
                ch = np.zeros(nxt.shape[:2], dtype=np.int64)
                for i in reversed(range(D)):
                    ch = ch * base + nxt[..., i]
            out.append(ch.astype(np.int64))
        return out

    def _counts(self, k: int) -> np.ndarray:
        """Mixed-radix decode of recombining node indices into count vectors."""
        D = self.d + self.m
        idx = np.arange(self.sizes[k])
        base = k + 1
        cols = []
        for _ in range(D):
            cols.append(idx % base)
            idx = idx // base
        return np.stack(cols, axis=1)

    def parent_map(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """For tree layout: (parent, atom) of every node at step k >= 1."""
        if self.layout != "tree":
            raise StructuralError("parent map is only defined for the tree layout")
        idx = np.arange(self.sizes[k])
        return idx // self.n_atoms, idx % self.n_atoms

    # ---- forward quantities ----------------------------------------------------

    def push_forward(self, values: np.ndarray, k: int, increment: np.ndarray) -> np.ndarray:
        """Carry a path functional one step forward.

        ``values`` has leading shape ``(n_k,)`` and ``increment`` is broadcast
        against ``(n_k, A, ...)``; returns the child values at step k+1. On the
        recombining layout every parent must agree on the child value.
        """
        ch = self.children(k)
        vals = np.asarray(values, dtype=float)
        inc = np.asarray(increment, dtype=float)
        tail = vals.shape[1:]
        cand = np.broadcast_to(vals[:, None, ...] + inc, ch.shape + tail)
        out = np.full((self.sizes[k + 1],) + tail, np.nan)
        if self.layout == "tree":
            out[ch.reshape(-1)] = cand.reshape((-1,) + tail)
            return out
        flat = ch.reshape(-1)
        cflat = cand.reshape((-1,) + tail)
        out[flat] = cflat
        if not np.allclose(out[flat], cflat, rtol=1e-12, atol=1e-12):
            raise PreconditionError(
                "path functional is not a function of the recombining state; "
                "use the tree layout"
            )
        return out

    @cached_property
    def node_probabilities(self) -> list:
        """P(node) for each step; on the tree this is the path probability."""
        probs = [np.ones(1)]
        for k in range(self.N):
            ch = self.children(k)
            nxt = np.zeros(self.sizes[k + 1])
            np.add.at(nxt, ch.reshape(-1), (probs[k][:, None] * self.prob[None, :]).reshape(-1))
            probs.append(nxt)
        return probs

    @cached_property
    def brownian_state(self) -> list:
        """Running Brownian sum W_k at each node, shape ``(n_k, d)``."""
        out = [np.zeros((1, self.d))]
        for k in range(self.N):
            out.append(self.push_forward(out[k], k, self.dB[None, :, :]))
        return out

    @cached_property
    def jump_state(self) -> list:
        """Running jump counts per mark at each node, shape ``(n_k, m)``."""
        out = [np.zeros((1, self.m))]
        for k in range(self.N):
            out.append(self.push_forward(out[k], k, self.jump[None, :, :]))
        return out

    def terminal_state(self) -> tuple[np.ndarray, np.ndarray]:
        return self.brownian_state[self.N], self.jump_state[self.N]

    def terminal_from_state(self, fn) -> np.ndarray:
        """Leaf values ``fn(W_T, N_T)`` with ``W_T`` (n, d) and ``N_T`` (n, m)."""
        W, J = self.terminal_state()
        xi = np.asarray(fn(W, J), dtype=float).reshape(-1)
        if xi.shape != (self.sizes[self.N],):
            raise StructuralError(f"terminal closure returned shape {xi.shape}")
        return xi

    # ---- conditional expectation and representation ---------------------------

    def branch_probs(self, k: int, weights: ProbabilityWeights | None = None) -> np.ndarray:
        if weights is None:
            return np.broadcast_to(self.prob, (self.sizes[k], self.n_atoms))
        return self.prob[None, :] * weights.branch[k]

    def child_values(self, k: int, X_next: np.ndarray) -> np.ndarray:
        X_next = np.asarray(X_next, dtype=float)
        if X_next.shape[0] != self.sizes[k + 1]:
            raise StructuralError(
                f"expected {self.sizes[k + 1]} values at step {k + 1}, got {X_next.shape[0]}"
            )
        if np.isnan(X_next).any():
            raise StructuralError(f"missing (NaN) child value at step {k + 1}")
        return X_next[self.children(k)]

    def expect(self, k: int, X_next: np.ndarray, weights: ProbabilityWeights | None = None) -> np.ndarray:
        """E_k[X_{k+1}] at every node of step k (under Q if weights given)."""
        Xc = self.child_values(k, X_next)
        return np.einsum("na,na->n", Xc, self.branch_probs(k, weights))

    def conditional_expectation(
        self,
        X_next: np.ndarray,
        k: int,
        node: int,
        weights: ProbabilityWeights | None = None,
    ) -> float:
        X_next = np.asarray(X_next, dtype=float)
        ch = self.children(k)[node]
        vals = X_next[ch]
        if np.isnan(vals).any():
            raise StructuralError(f"missing child value below node ({k}, {node})")
        p = self.prob if weights is None else self.prob * weights.branch[k][node]
        return float(vals @ p)

    def project(self, centered: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """L2(P) projection of branch values onto the Brownian and jump increments.

        ``centered`` has shape ``(n, A)``; returns ``z (n, d)``, ``u (n, m)`` and
        the residual ``(n, A)``. The basis increments are P-orthogonal, so each
        coefficient is a single covariance ratio.
        """
        pX = centered * self.prob[None, :]
        z = pX @ self.dB / self.h
        u = (pX @ self.dmu) / self.jump_var[None, :] if self.m else np.zeros((len(centered), 0))
        resid = centered - z @ self.dB.T - u @ self.dmu.T
        return z, u, resid

    def represent(self, k: int, X_next: np.ndarray):
        """Mean, (z, u) and residual of ``X_{k+1}`` at every node of step k."""
        Xc = self.child_values(k, X_next)
        mean = Xc @ self.prob
        z, u, r = self.project(Xc - mean[:, None])
        return mean, z, u, r

    def to_discrete_density(self, psi: np.ndarray) -> np.ndarray:
        """Rescale a mark function given against ``lambda`` to one against ``nu``.

        ``<psi, u>_lambda == <psi', u>_nu`` for ``psi' = psi * lambda / nu``.
        """
        return np.asarray(psi, dtype=float) * (self.marks.lam / self.nu)

    def __repr__(self) -> str:
        return (
            f"LatticeModel(T={self.T}, N={self.N}, d={self.d}, m={self.m}, "
            f"layout={self.layout!r}, nodes={self.total_nodes})"
        )


def build_lattice(
    grid: TimeGrid,
    marks: MarkSpace | None = None,
    d: int = 1,
    layout: str = "tree",
    budget: int = DEFAULT_BUDGET,
) -> LatticeModel:
    return LatticeModel(grid, marks, d=d, layout=layout, budget=budget)


def conditional_expectation(model, X_next, k, node, weights=None) -> float:
    return model.conditional_expectation(X_next, k, node, weights)


def project_representation(model: LatticeModel, Xc, tol: float = 1e-10):
    """Project centered one-step values onto span{dB_i, dmu_j}.

    ``Xc`` has shape ``(A,)`` or ``(n, A)``. Raises if the P-mean is not zero.
    """
    X = np.asarray(Xc, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != model.n_atoms:
        raise StructuralError(f"expected {model.n_atoms} branch values, got {X.shape[1]}")
    mean = X @ model.prob
    scale = 1.0 + np.abs(X).max(axis=1)
    bad = np.abs(mean) > tol * scale
    if bad.any():
        i = int(np.argmax(bad))
        raise PreconditionError(f"input {i} has nonzero conditional mean {mean[i]:.3e}")
    z, u, r = model.project(X)
    if single:
        return z[0], u[0], r[0]
    return z, u, r


def _step_field(value, k: int, n: int, dim: int) -> np.ndarray:
    """Resolve a predictable coefficient at step k to shape (n, dim).

    A list is read as per-step arrays; anything else is a constant broadcast
    over nodes.
    """
    if isinstance(value, list):
        arr = np.asarray(value[k], dtype=float)
    else:
        arr = np.asarray(value, dtype=float)
    return np.broadcast_to(arr, (n, dim))


def doleans_exponential(
    model: LatticeModel,
    phi=0.0,
    psi=0.0,
    floor: float = WEIGHT_FLOOR,
) -> ProbabilityWeights:
    """Discrete stochastic exponential of ``sum phi dB + sum psi dmu``.

    The branch weight ``1 + phi.dB + psi.dmu`` has P-mean one at every node, so
    under Q the increments acquire the drifts ``E^Q[dB] = phi h`` and
    ``E^Q[dmu_j] = psi_j nu_j h``. ``phi``/``psi`` are constants or per-step lists
    of ``(n_k, d)`` / ``(n_k, m)`` arrays.
    """
    branch, density = [], [np.ones(1)]
    for k in range(model.N):
        n = model.n_nodes(k)
        ph = _step_field(phi, k, n, model.d)
        ps = _step_field(psi, k, n, model.m)
        w = 1.0 + ph @ model.dB.T + ps @ model.dmu.T
        if (w <= floor).any():
            i, a = np.unravel_index(int(np.argmin(w)), w.shape)
            raise MeasureChangeError(k, int(i), float(w[i, a]), floor)
        branch.append(w)
        # Q mass pushed forward, then divided by P mass (valid on both layouts)
        qmass = np.zeros(model.n_nodes(k + 1))
        pk = model.node_probabilities[k]
        np.add.at(
            qmass,
            model.children(k).reshape(-1),
            ((density[k] * pk)[:, None] * model.prob[None, :] * w).reshape(-1),
        )
        density.append(qmass / model.node_probabilities[k + 1])
    return ProbabilityWeights(branch, density, floor)


def identity_weights(model: LatticeModel) -> ProbabilityWeights:
    return ProbabilityWeights(
        [np.ones((model.n_nodes(k), model.n_atoms)) for k in range(model.N)],
        [np.ones(model.n_nodes(k)) for k in range(model.N + 1)],
    )


def zeros_adapted(model: LatticeModel) -> list:
    return [np.zeros(model.n_nodes(k)) for k in range(model.N + 1)]


def zeros_predictable(model: LatticeModel, dim: int) -> list:
    return [np.zeros((model.n_nodes(k), dim)) for k in range(model.N)]


def stack_terminal(values: Sequence[float] | np.ndarray, model: LatticeModel) -> np.ndarray:
    xi = np.asarray(values, dtype=float).reshape(-1)
    if xi.shape[0] != model.n_nodes(model.N):
        raise StructuralError(
            f"terminal condition has {xi.shape[0]} values, lattice has "
            f"{model.n_nodes(model.N)} leaves"
        )
    if not np.isfinite(xi).all():
        raise PreconditionError("terminal condition must be finite at every leaf")
    return xi
