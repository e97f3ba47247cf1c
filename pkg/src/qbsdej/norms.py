"""S-infinity, BMO and L-infinity(nu) norms of a candidate triple on the lattice.

Stopping times on a finite tree are unions of nodes, so every essential
supremum over stopping times is a maximum over nodes of a node-wise
conditional expectation.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .lattice import LatticeModel, ProbabilityWeights


@dataclass(frozen=True)
class NormReport:
    s_inf: float
    h2_bmo: float  # squared H^2_BMO norm
    j2_bmo: float  # squared J^2_BMO norm
    linf_nu: float

    @property
    def ball(self) -> float:
        """s_inf^2 + |Z|^2_BMO + |U|^2_BMO + |U|^2_inf."""
        return self.s_inf**2 + self.h2_bmo + self.j2_bmo + self.linf_nu**2

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ball"] = self.ball
        return out


def remaining_variation(model: LatticeModel, increments: list, weights: ProbabilityWeights | None = None) -> list:
    """Node-wise E_k[sum_{j >= k} a_j] for predictable nonnegative a_j."""
    acc = [None] * (model.N + 1)
    acc[model.N] = np.zeros(model.n_nodes(model.N))
    for k in reversed(range(model.N)):
        acc[k] = increments[k] + model.expect(k, acc[k + 1], weights)
    return acc


def z_increments(model: LatticeModel, Z: list) -> list:
    return [np.sum(np.asarray(z) ** 2, axis=-1) * model.h for z in Z]


def u_increments(model: LatticeModel, U: list) -> list:
    lam = model.marks.lam
    return [np.sum(np.asarray(u) ** 2 * lam, axis=-1) * model.h for u in U]


def compute_norms(model: LatticeModel, triple, weights: ProbabilityWeights | None = None) -> NormReport:
    s_inf = max(float(np.max(np.abs(y))) for y in triple.Y)
    h2 = max(float(a.max()) for a in remaining_variation(model, z_increments(model, triple.Z), weights))
    if model.m:
        j2 = max(float(a.max()) for a in remaining_variation(model, u_increments(model, triple.U), weights))
        linf = max(float(np.max(np.abs(u))) for u in triple.U)
    else:
        j2 = linf = 0.0
    return NormReport(s_inf, h2, j2, linf)
