"""Stochastic variational inequality instances.

An instance bundles a scenario space, a per-scenario mapping ``F(., s)`` and
a per-scenario closed convex set ``C(s)`` with an exact projection.  All
batched operations take an ``(k, n)`` array together with the ``k`` scenario
indices its rows belong to, so solvers can work on any subset of scenarios.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError, IntegrityError, ParameterError
from .space import ScenarioSpace, norm, project_N

MONOTONE_TOL = 1e-10
CUSTOM_PROJECTION_TOL = 1e-10


def _idx(idx, count):
    if idx is None:
        return np.arange(count)
    return np.atleast_1d(np.asarray(idx, dtype=np.intp))


# -- mappings ---------------------------------------------------------------


class Mapping:
    """Per-scenario single-valued map ``F(., s)``.

    Subclasses provide ``evaluate`` and ``lipschitz_moduli``.  Only the
    affine implementation ships; the semismooth Newton solver needs it.
    """

    lipschitz_moduli: np.ndarray

    def evaluate(self, X, idx=None) -> np.ndarray:
        raise NotImplementedError


class AffineMapping(Mapping):
    """``F(x, s) = M_s x + b_s``.

    Parameters
    ----------
    matrices : array_like, shape (S, n, n)
    offsets : array_like, shape (S, n)
    """

    def __init__(self, matrices, offsets):
        M = np.array(matrices, dtype=float)
        b = np.array(offsets, dtype=float)
        if M.ndim != 3 or M.shape[1] != M.shape[2]:
            raise DimensionError(f"matrices must have shape (S, n, n), got {M.shape}")
        if b.shape != M.shape[:2]:
            raise DimensionError(
                f"offsets shape {b.shape} does not match matrices {M.shape}"
            )
        if not (np.all(np.isfinite(M)) and np.all(np.isfinite(b))):
            raise ParameterError("mapping data must be finite")
        M.setflags(write=False)
        b.setflags(write=False)
        self.matrices = M
        self.offsets = b
        mu = np.linalg.norm(M, ord=2, axis=(1, 2))
        mu.setflags(write=False)
        self.lipschitz_moduli = mu

    @property
    def scenario_count(self) -> int:
        return self.matrices.shape[0]

    @property
    def n(self) -> int:
        return self.matrices.shape[1]

    def evaluate(self, X, idx=None) -> np.ndarray:
        i = _idx(idx, self.scenario_count)
        return np.einsum("sij,sj->si", self.matrices[i], X) + self.offsets[i]

    def to_dict(self) -> dict:
        return {
            "kind": "affine",
            "matrices": [m.ravel().tolist() for m in self.matrices],
            "offsets": self.offsets.tolist(),
        }


# -- constraint sets -----------------------------------------------------


class ConstraintFamily:
    """Per-scenario closed convex sets with exact Euclidean projection."""

    kind: str = ""
    piecewise_affine = False

    def project(self, Y, idx=None) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, Y, idx=None) -> np.ndarray:
        """An element of the generalized Jacobian of the projection at ``Y``.

        Points on a boundary between pieces get the lower-dimensional piece
        (boundary coordinates count as inactive).
        """
        raise ConfigurationError(
            f"constraint kind {self.kind!r} has no piecewise-affine projection"
        )

    def validate(self, space: ScenarioSpace) -> None:
        pass


class Orthant(ConstraintFamily):
    """``C(s) = R^n_+`` for every scenario."""

    kind = "orthant"
    piecewise_affine = True

    def project(self, Y, idx=None):
        return np.maximum(Y, 0.0)

    def jacobian(self, Y, idx=None):
        k, n = Y.shape
        J = np.zeros((k, n, n))
        ar = np.arange(n)
        J[:, ar, ar] = Y > 0
        return J

    def to_dict(self):
        return {"kind": self.kind}


class Box(ConstraintFamily):
    """Per-scenario coordinate bounds ``lower <= x <= upper``.

    Infinite bounds are allowed.
    """

    kind = "box"
    piecewise_affine = True

    def __init__(self, lower, upper):
        lo = np.array(lower, dtype=float)
        hi = np.array(upper, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 2:
            raise DimensionError("box bounds must both have shape (S, n)")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)) or np.any(lo > hi):
            raise ParameterError("box bounds must be ordered, lower <= upper")
        self.lower = lo
        self.upper = hi

    def validate(self, space):
        if self.lower.shape != space.shape:
            raise DimensionError(f"box bounds shape {self.lower.shape} != {space.shape}")

    def project(self, Y, idx=None):
        i = _idx(idx, self.lower.shape[0])
        return np.clip(Y, self.lower[i], self.upper[i])

    def jacobian(self, Y, idx=None):
        i = _idx(idx, self.lower.shape[0])
        k, n = Y.shape
        J = np.zeros((k, n, n))
        ar = np.arange(n)
        J[:, ar, ar] = (Y > self.lower[i]) & (Y < self.upper[i])
        return J

    def to_dict(self):
        # JSON has no infinity; unbounded sides are written as null
        def enc(a):
            return [[v if np.isfinite(v) else None for v in row] for row in a.tolist()]

        return {"kind": self.kind, "lower": enc(self.lower), "upper": enc(self.upper)}


def project_triangle(a, b, cap):
    """Project points ``(a, b)`` onto ``{a >= 0, b >= 0, a + b <= cap}``.

    Clamp to the orthant; where that breaks the cap, move to the cap edge
    and clamp along it.  Works elementwise on arrays.
    """
    pa = np.maximum(a, 0.0)
    pb = np.maximum(b, 0.0)
    over = pa + pb > cap
    ea = np.clip(0.5 * (a - b + cap), 0.0, cap)
    pa = np.where(over, ea, pa)
    pb = np.where(over, cap - ea, pb)
    return pa, pb


class CappedPairs(ConstraintFamily):
    """Product of triangles linking coordinate pairs.

    For pair ``j`` the coordinates ``first[j]`` and ``second[j]`` must be
    nonnegative with sum at most ``caps[s, j]``.  Coordinates in no pair are
    unconstrained.
    """

    kind = "capped_pairs"
    piecewise_affine = True

    def __init__(self, first, second, caps):
        self.first = np.array(first, dtype=np.intp)
        self.second = np.array(second, dtype=np.intp)
        self.caps = np.array(caps, dtype=float)
        if self.first.shape != self.second.shape or self.first.ndim != 1:
            raise DimensionError("pair index arrays must be 1-d of equal length")
        if self.caps.ndim != 2 or self.caps.shape[1] != self.first.size:
            raise DimensionError(
                f"caps must have shape (S, {self.first.size}), got {self.caps.shape}"
            )
        if not np.all(np.isfinite(self.caps)) or np.any(self.caps <= 0):
            raise ParameterError("triangle caps must be finite and > 0")
        used = np.concatenate([self.first, self.second])
        if np.unique(used).size != used.size:
            raise ParameterError("a coordinate appears in more than one pair")

    def validate(self, space):
        if self.caps.shape[0] != space.scenario_count:
            raise DimensionError(
                f"caps given for {self.caps.shape[0]} scenarios, space has {space.scenario_count}"
            )
        used = np.concatenate([self.first, self.second])
        if used.size and (used.min() < 0 or used.max() >= space.n):
            raise DimensionError("pair index outside the decision vector")

    def project(self, Y, idx=None):
        i = _idx(idx, self.caps.shape[0])
        out = np.array(Y, dtype=float, copy=True)
        pa, pb = project_triangle(Y[:, self.first], Y[:, self.second], self.caps[i])
        out[:, self.first] = pa
        out[:, self.second] = pb
        return out

    def jacobian(self, Y, idx=None):
        i = _idx(idx, self.caps.shape[0])
        k, n = Y.shape
        J = np.zeros((k, n, n))
        ar = np.arange(n)
        free = np.ones(n, dtype=bool)
        free[self.first] = False
        free[self.second] = False
        J[:, ar[free], ar[free]] = 1.0
        a = Y[:, self.first]
        b = Y[:, self.second]
        cap = self.caps[i]
        ap = np.maximum(a, 0.0)
        bp = np.maximum(b, 0.0)
        ea = np.clip(0.5 * (a - b + cap), 0.0, cap)
        at_cap = ap + bp >= cap
        on_cap = at_cap & (ea > 0) & (ea < cap)
        below = ~at_cap
        # per-pair 2x2 blocks [[jaa, jab], [jab, jbb]]; vertices get zero
        jaa = np.where(on_cap, 0.5, np.where(below & (a > 0), 1.0, 0.0))
        jbb = np.where(on_cap, 0.5, np.where(below & (b > 0), 1.0, 0.0))
        jab = np.where(on_cap, -0.5, 0.0)
        f, g = self.first, self.second
        J[:, f, f] = jaa
        J[:, g, g] = jbb
        J[:, f, g] = jab
        J[:, g, f] = jab
        return J

    def to_dict(self):
        return {
            "kind": self.kind,
            "first": self.first.tolist(),
            "second": self.second.tolist(),
            "caps": self.caps.tolist(),
        }


class CustomConstraint(ConstraintFamily):
    """Caller-supplied projection ``project_fn(y, s) -> p`` for one scenario.

    Returned points are checked for feasibility by re-projecting them: a
    point of ``C(s)`` is its own projection.
    """

    kind = "custom"

    def __init__(self, project_fn, scenario_count):
        self.project_fn = project_fn
        self.scenario_count = scenario_count

    def project(self, Y, idx=None):
        i = _idx(idx, self.scenario_count)
        out = np.empty_like(Y, dtype=float)
        for row, s in enumerate(i):
            p = np.asarray(self.project_fn(Y[row], int(s)), dtype=float)
            again = np.asarray(self.project_fn(p, int(s)), dtype=float)
            if np.linalg.norm(again - p) > CUSTOM_PROJECTION_TOL * (1.0 + np.linalg.norm(p)):
                raise IntegrityError(
                    f"custom projection for scenario {s} returned a point outside C(s)"
                )
            out[row] = p
        return out


def constraint_from_dict(d: dict) -> ConstraintFamily:
    kind = d.get("kind")
    if kind == "orthant":
        return Orthant()
    if kind == "box":
        def dec(rows, fill):
            return [[fill if v is None else v for v in row] for row in rows]

        return Box(dec(d["lower"], -np.inf), dec(d["upper"], np.inf))
    if kind == "capped_pairs":
        return CappedPairs(d["first"], d["second"], d["caps"])
    raise ParameterError(f"unknown or non-serializable constraint kind {kind!r}")


# -- instances -------------------------------------------------------------


@dataclass
class MonotoneCertificate:
    min_eigenvalues: np.ndarray
    monotone: bool


@dataclass
class SviInstance:
    """SVI in extensive form over a finite scenario space."""

    space: ScenarioSpace
    mapping: Mapping
    constraints: ConstraintFamily
    name: str = ""
    certificate: MonotoneCertificate | None = field(default=None, init=False)

    def __post_init__(self):
        m = self.mapping
        if isinstance(m, AffineMapping):
            if m.scenario_count != self.space.scenario_count:
                raise DimensionError(
                    f"mapping has {m.scenario_count} scenarios, space has {self.space.scenario_count}"
                )
            if m.n != self.space.n:
                raise DimensionError(f"mapping dimension {m.n} != space dimension {self.space.n}")
            self.certificate = check_monotone(self)
            if not self.certificate.monotone:
                bad = np.flatnonzero(self.certificate.min_eigenvalues < -MONOTONE_TOL)
                warnings.warn(
                    f"instance {self.name!r} is not monotone in scenarios {bad.tolist()}",
                    stacklevel=3,
                )
        self.constraints.validate(self.space)

    @property
    def lipschitz_moduli(self) -> np.ndarray:
        return self.mapping.lipschitz_moduli

    def to_dict(self) -> dict:
        if not isinstance(self.mapping, AffineMapping):
            raise ParameterError("only affine instances serialize")
        if not hasattr(self.constraints, "to_dict"):
            raise ParameterError(f"constraint kind {self.constraints.kind!r} does not serialize")
        return {
            "name": self.name,
            "space": self.space.to_dict(),
            "mapping": self.mapping.to_dict(),
            "constraints": self.constraints.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SviInstance":
        space = ScenarioSpace.from_dict(d["space"])
        mp = d["mapping"]
        if mp.get("kind", "affine") != "affine":
            raise ParameterError(f"unsupported mapping kind {mp.get('kind')!r}")
        n = space.n
        mats = np.array(mp["matrices"], dtype=float)
        if mats.ndim != 2 or mats.shape[1] != n * n:
            raise DimensionError(
                f"mapping.matrices: expected {space.scenario_count} rows of {n * n} entries"
            )
        mapping = AffineMapping(mats.reshape(-1, n, n), mp["offsets"])
        return cls(space, mapping, constraint_from_dict(d["constraints"]), name=d.get("name", ""))


def evaluate_F(inst: SviInstance, x) -> np.ndarray:
    """Apply ``F(., s)`` scenario by scenario."""
    x = inst.space.check(x, "x")
    return inst.mapping.evaluate(x)


def project_C(inst: SviInstance, q) -> np.ndarray:
    """Nearest point of ``C(s)`` to ``q(s)`` for every scenario."""
    q = inst.space.check(q, "q")
    return inst.constraints.project(q)


def check_monotone(inst: SviInstance) -> MonotoneCertificate:
    """Smallest eigenvalue of the symmetric part of each ``M_s``."""
    M = inst.mapping.matrices
    sym = 0.5 * (M + np.transpose(M, (0, 2, 1)))
    lam = np.linalg.eigvalsh(sym)[:, 0]
    return MonotoneCertificate(lam, bool(np.all(lam >= -MONOTONE_TOL)))


@dataclass
class ResidualReport:
    n_membership: float
    m_membership: float
    natural: float

    @property
    def total(self) -> float:
        return max(self.n_membership, self.m_membership, self.natural)


def residual_terms(inst: SviInstance, x, w) -> ResidualReport:
    space = inst.space
    x = space.check(x, "x")
    w = space.check(w, "w")
    pi = inst.constraints.project(x - inst.mapping.evaluate(x) - w)
    return ResidualReport(
        n_membership=norm(x - project_N(x, space), space),
        m_membership=norm(project_N(w, space), space),
        natural=norm(x - pi, space),
    )


def extensive_residual(inst: SviInstance, x, w) -> float:
    """Zero exactly when ``(x, w)`` solves the extensive-form SVI.

    Maximum of the distance of ``x`` from the nonanticipative subspace, the
    norm of the nonanticipative part of ``w``, and the natural-map residual
    ``||x - P_C(x - F(x) - w)||``.
    """
    return residual_terms(inst, x, w).total
