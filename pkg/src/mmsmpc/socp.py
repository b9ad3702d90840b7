"""Second-order cone programs in one canonical form,

    minimize    c^T x
    subject to  A_eq x = b_eq
                ||C_i x + d_i||_2 <= a_i^T x + b_i      (i = 1..m)

and a solver wrapper around Clarabel. A cone with an empty C is a plain
linear inequality a^T x + b >= 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import scipy.sparse as sp

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
NUMERICAL_FAILURE = "numerical_failure"


@dataclass
class Cone:
    C: np.ndarray
    d: np.ndarray
    a: np.ndarray
    b: float

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float).ravel()
        self.C = np.asarray(self.C, dtype=float).reshape(-1, self.a.size)
        self.d = np.asarray(self.d, dtype=float).ravel()
        self.b = float(self.b)
        if self.d.size != self.C.shape[0]:
            raise ValueError("cone offset d does not match C")


@dataclass
class ConeProgram:
    n: int
    c: np.ndarray
    cones: List[Cone] = field(default_factory=list)
    A_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        if self.c.size != self.n:
            raise ValueError(f"objective has {self.c.size} entries for {self.n} variables")
        if self.A_eq is None:
            self.A_eq = np.zeros((0, self.n))
            self.b_eq = np.zeros(0)
        self.A_eq = np.asarray(self.A_eq, dtype=float).reshape(-1, self.n)
        self.b_eq = np.asarray(self.b_eq, dtype=float).ravel()
        if self.b_eq.size != self.A_eq.shape[0]:
            raise ValueError("equality rows and right-hand side disagree")
        for i, cone in enumerate(self.cones):
            if cone.a.size != self.n:
                raise ValueError(f"cone {i} has {cone.a.size} columns for {self.n} variables")
        arrays = [self.c, self.A_eq, self.b_eq] + [x for cn in self.cones for x in (cn.C, cn.d, cn.a)]
        if not all(np.all(np.isfinite(x)) for x in arrays):
            raise ValueError("cone program has non-finite entries")

    def add(self, C, d, a, b) -> None:
        self.cones.append(Cone(C, d, a, b))


@dataclass
class Residuals:
    max_cone: float
    max_eq: float

    @property
    def worst(self) -> float:
        return max(self.max_cone, self.max_eq)


@dataclass
class Solution:
    x: Optional[np.ndarray]
    value: float
    status: str
    residuals: Optional[Residuals] = None
    iterations: int = 0


def verify(program: ConeProgram, x) -> Residuals:
    """Constraint violations of ``x``, computed without reference to any solver."""
    x = np.asarray(x, dtype=float)
    worst_cone = 0.0
    for cone in program.cones:
        lhs = np.linalg.norm(cone.C @ x + cone.d) if cone.C.shape[0] else 0.0
        worst_cone = max(worst_cone, lhs - (cone.a @ x + cone.b))
    eq = np.abs(program.A_eq @ x - program.b_eq).max() if program.b_eq.size else 0.0
    return Residuals(max(worst_cone, 0.0), float(eq))


def solve(program: ConeProgram, tol: float = 1e-7, max_iter: int = 200) -> Solution:
    import clarabel

    rows, rhs, cones = [], [], []
    if program.b_eq.size:
        rows.append(program.A_eq)
        rhs.append(program.b_eq)
        cones.append(clarabel.ZeroConeT(program.b_eq.size))
    linear = [cn for cn in program.cones if cn.C.shape[0] == 0]
    if linear:
        rows.append(-np.vstack([cn.a for cn in linear]))
        rhs.append(np.array([cn.b for cn in linear]))
        cones.append(clarabel.NonnegativeConeT(len(linear)))
    for cn in program.cones:
        if cn.C.shape[0] == 0:
            continue
        # s = [a^T x + b; C x + d] in the second-order cone
        rows.append(-cn.a[None, :])
        rows.append(-cn.C)
        rhs.append(np.concatenate([[cn.b], cn.d]))
        cones.append(clarabel.SecondOrderConeT(cn.C.shape[0] + 1))
    A = sp.csc_matrix(np.vstack(rows)) if rows else sp.csc_matrix((0, program.n))
    b = np.concatenate(rhs) if rhs else np.zeros(0)
    P = sp.csc_matrix((program.n, program.n))

    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = max_iter
    settings.tol_gap_abs = tol
    settings.tol_gap_rel = tol
    settings.tol_feas = tol
    settings.tol_infeas_abs = tol
    settings.tol_infeas_rel = tol
    solver = clarabel.DefaultSolver(P, program.c, A, b, cones, settings)
    res = solver.solve()

    status = str(res.status)
    if status == "Solved":
        x = np.asarray(res.x, dtype=float)
        return Solution(x, float(program.c @ x), OPTIMAL, verify(program, x), res.iterations)
    if status in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        return Solution(None, np.inf, INFEASIBLE, None, res.iterations)
    return Solution(None, np.nan, NUMERICAL_FAILURE, None, res.iterations)


def dump_program(program: ConeProgram, path) -> None:
    """Write the program as plain-text coordinate lists for offline inspection."""
    with open(path, "w") as fh:
        fh.write(f"%%ConeProgram n={program.n} n_eq={program.b_eq.size} n_cones={len(program.cones)}\n")
        fh.write("% objective\n")
        for i in np.flatnonzero(program.c):
            fh.write(f"c {i + 1} {program.c[i]:.17g}\n")
        for r, c in zip(*np.nonzero(program.A_eq)):
            fh.write(f"Aeq {r + 1} {c + 1} {program.A_eq[r, c]:.17g}\n")
        for r in range(program.b_eq.size):
            fh.write(f"beq {r + 1} {program.b_eq[r]:.17g}\n")
        for k, cn in enumerate(program.cones, start=1):
            fh.write(f"% cone {k} dim={cn.C.shape[0]}\n")
            for i in np.flatnonzero(cn.a):
                fh.write(f"a {k} {i + 1} {cn.a[i]:.17g}\n")
            fh.write(f"b {k} {cn.b:.17g}\n")
            for r, c in zip(*np.nonzero(cn.C)):
                fh.write(f"C {k} {r + 1} {c + 1} {cn.C[r, c]:.17g}\n")
            for r in np.flatnonzero(cn.d):
                fh.write(f"d {k} {r + 1} {cn.d[r]:.17g}\n")
