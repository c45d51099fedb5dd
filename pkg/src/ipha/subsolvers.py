"""Scenario subproblem solvers for the inexact proximal step.

At outer iterate ``(x_k, w_k)`` every scenario ``s`` asks for a fixed point
of

    Phi_s(z) = P_C(s)(x_k(s) - w_k(s)/r - F(z, s)/r).

``fpa_solve`` iterates ``Phi_s`` directly (a contraction once ``r`` exceeds
the Lipschitz modulus of ``F(., s)``); ``snm_solve`` runs a damped
semismooth Newton method on ``G(z) = z - Phi_s(z)``.  The batched kernels
``fpa_batch`` and ``snm_batch`` advance many scenarios at once; each
scenario still stops on its own residual.

``build_certificate`` turns any approximate fixed point into a pair
``(x_hat, w_hat)`` that satisfies the proximal inclusion exactly, leaving
all of the inexactness in ``delta = w_hat - x_hat``.  This one-projection
construction is a design choice of this package, not a fixed part of the
method; any pair satisfying the inclusion would do.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetError, ConfigurationError, ParameterError
from .problem import AffineMapping, SviInstance

log = logging.getLogger(__name__)

FPA = "FPA"
SNM = "SNM"


@dataclass
class NewtonOptions:
    backtrack: float = 0.5
    min_step: float = 1e-6
    regularization: float = 1e-10
    sufficient_decrease: float = 1e-4


@dataclass
class SubsolverConfig:
    """Inner solver settings.

    ``inner_tol`` is the floor of the per-scenario residual target.  Each
    outer iteration starts from ``inner_rel`` times the previous stop
    quantity (never below the floor) and halves the target whenever the
    certificate is rejected; ``inner_rel = 0`` solves to the floor at once.
    """

    method: str = SNM
    inner_tol: float = 1e-9
    inner_rel: float = 0.0
    max_inner_iters: int = 100_000
    newton: NewtonOptions = field(default_factory=NewtonOptions)
    warm_start: bool = True

    def __post_init__(self):
        self.method = self.method.upper()
        if self.method not in (FPA, SNM):
            raise ParameterError(f"unknown subsolver method {self.method!r}")
        if not self.inner_tol > 0:
            raise ParameterError("inner_tol must be > 0")
        if self.inner_rel < 0:
            raise ParameterError("inner_rel must be >= 0")
        if self.max_inner_iters < 1:
            raise ParameterError("max_inner_iters must be >= 1")
        if not 0 < self.newton.backtrack < 1:
            raise ParameterError("backtracking factor must lie in (0, 1)")


@dataclass
class Certificate:
    """Approximate proximal point ``(x_hat, w_hat)`` with ``delta = w_hat - x_hat``."""

    x_hat: np.ndarray
    w_hat: np.ndarray
    delta: np.ndarray
    accepted: bool = False


@dataclass
class InnerResult:
    z: np.ndarray
    inner_iters: int
    residual: float
    residuals: list = field(default_factory=list)
    fallbacks: int = 0


@dataclass
class BatchResult:
    Z: np.ndarray
    iters: np.ndarray
    residual: np.ndarray
    fallbacks: np.ndarray
    history: list = field(default_factory=list)

    def diagnostics(self, idx, method):
        return [
            {
                "scenario": int(s),
                "method": method,
                "inner_iters": int(self.iters[j]),
                "residual": float(self.residual[j]),
                "fallbacks": int(self.fallbacks[j]),
            }
            for j, s in enumerate(idx)
        ]


def anchor(state) -> np.ndarray:
    """``x_k - w_k / r``, the point every scenario prox step is centred on."""
    return state.x - state.w / state.r


def _phi(inst, q, r, Z, idx):
    return inst.constraints.project(q - inst.mapping.evaluate(Z, idx) / r, idx)


def phi(inst: SviInstance, state, z, s: int) -> np.ndarray:
    """``Phi_s(z)`` for one scenario ``s`` at the outer iterate in ``state``."""
    q = anchor(state)[s : s + 1]
    z = np.asarray(z, dtype=float).reshape(1, -1)
    return _phi(inst, q, state.r, z, np.array([s]))[0]


def check_fpa_parameter(inst: SviInstance, r: float, idx=None) -> None:
    """FPA contracts only when ``r`` exceeds every Lipschitz modulus involved."""
    mu = inst.lipschitz_moduli
    idx = np.arange(mu.size) if idx is None else np.atleast_1d(idx)
    bad = [int(s) for s in idx if not r > mu[s]]
    if bad:
        s = bad[0]
        raise ConfigurationError(
            f"FPA needs r > mu for every scenario; scenario {s} has mu = {float(mu[s])!r} >= r = {float(r)!r}"
        )


def fpa_batch(inst, q, r, Z0, idx, tol, max_iters, record=False) -> BatchResult:
    """Fixed-point iteration on every scenario in ``idx`` until its step is <= tol."""
    k = len(idx)
    Z = np.array(Z0, dtype=float, copy=True)
    iters = np.zeros(k, dtype=int)
    res = np.full(k, np.inf)
    history = []
    active = np.arange(k)
    for _ in range(max_iters):
        if active.size == 0:
            break
        if active.size == k:
            Zn = _phi(inst, q, r, Z, idx)
            d = np.linalg.norm(Zn - Z, axis=1)
            Z = Zn
        else:
            sub = idx[active]
            Zn = _phi(inst, q[active], r, Z[active], sub)
            d = np.linalg.norm(Zn - Z[active], axis=1)
            Z[active] = Zn
        iters[active] += 1
        res[active] = d
        if record:
            step = np.full(k, np.nan)
            step[active] = d
            history.append(step)
        active = active[d > tol]
    return BatchResult(Z, iters, res, np.zeros(k, dtype=int), history)


def _newton_directions(V, rhs, shift, fallback):
    """Solve ``V d = rhs`` scenario by scenario, regularizing singular systems.

    Rows that stay singular are flagged in ``fallback`` and get ``d = 0``.
    """
    try:
        d = np.linalg.solve(V, rhs[..., None])[..., 0]
        if np.all(np.isfinite(d)):
            return d
    except np.linalg.LinAlgError:
        pass
    d = np.zeros_like(rhs)
    eye = np.eye(V.shape[1])
    for j in range(V.shape[0]):
        for s in (0.0, shift):
            try:
                dj = np.linalg.solve(V[j] + s * eye, rhs[j])
            except np.linalg.LinAlgError:
                continue
            if np.all(np.isfinite(dj)):
                d[j] = dj
                break
        else:
            fallback[j] = True
    return d


def snm_batch(inst, q, r, Z0, idx, tol, max_iters, opts: NewtonOptions | None = None,
              record=False) -> BatchResult:
    """Damped semismooth Newton on ``G(z) = z - Phi(z)`` for the scenarios in ``idx``.

    The Newton matrix is ``I + J_P M / r`` with ``J_P`` the generalized
    Jacobian element of the projection at the pre-projection point.  Steps
    are backtracked on ``||G||``; when no step length down to ``min_step``
    decreases it, one fixed-point sweep is taken instead.
    """
    if not isinstance(inst.mapping, AffineMapping) or not inst.constraints.piecewise_affine:
        raise ConfigurationError("SNM needs an affine mapping and a piecewise-affine projection")
    opts = opts or NewtonOptions()
    M = inst.mapping.matrices
    k, n = Z0.shape
    eye = np.eye(n)
    Z = np.array(Z0, dtype=float, copy=True)
    iters = np.zeros(k, dtype=int)
    res = np.full(k, np.inf)
    fallbacks = np.zeros(k, dtype=int)
    history = []

    def residual(Zs, qs, sub):
        Y = qs - inst.mapping.evaluate(Zs, sub) / r
        G = Zs - inst.constraints.project(Y, sub)
        return Y, G, np.linalg.norm(G, axis=1)

    active = np.arange(k)
    Y, G, g = residual(Z, q, idx)
    res[:] = g
    for _ in range(max_iters + 1):
        keep = g > tol
        active, Y, G, g = active[keep], Y[keep], G[keep], g[keep]
        if record:
            step = np.full(k, np.nan)
            step[active] = g
            history.append(step)
        if active.size == 0:
            break
        todo = active[iters[active] < max_iters]
        if todo.size < active.size:
            sel = iters[active] < max_iters
            active, Y, G, g = todo, Y[sel], G[sel], g[sel]
            if active.size == 0:
                break
        sub = idx[active]
        qa = q[active]
        Za = Z[active]
        V = eye + inst.constraints.jacobian(Y, sub) @ M[sub] / r
        failed = np.zeros(active.size, dtype=bool)
        d = _newton_directions(V, -G, opts.regularization, failed)

        t = np.ones(active.size)
        newZ = Za.copy()
        newY, newG, newg = Y.copy(), G.copy(), g.copy()
        pending = np.flatnonzero(~failed)
        while pending.size:
            trial = Za[pending] + t[pending, None] * d[pending]
            Yt, Gt, gt = residual(trial, qa[pending], sub[pending])
            ok = gt <= (1.0 - opts.sufficient_decrease * t[pending]) * g[pending]
            acc = pending[ok]
            newZ[acc], newY[acc], newG[acc], newg[acc] = trial[ok], Yt[ok], Gt[ok], gt[ok]
            pending = pending[~ok]
            t[pending] *= opts.backtrack
            stuck = t[pending] < opts.min_step
            failed[pending[stuck]] = True
            pending = pending[~stuck]

        if np.any(failed):
            fb = np.flatnonzero(failed)
            fallbacks[active[fb]] += 1
            log.debug("SNM fallback to a fixed-point sweep in scenarios %s", sub[fb].tolist())
            newZ[fb] = inst.constraints.project(Y[fb], sub[fb])
            newY[fb], newG[fb], newg[fb] = residual(newZ[fb], qa[fb], sub[fb])
        Z[active] = newZ
        iters[active] += 1
        res[active] = newg
        Y, G, g = newY, newG, newg
    return BatchResult(Z, iters, res, fallbacks, history)


def run_batch(inst, state, Z0, idx, tol, max_iters, cfg: SubsolverConfig, record=False):
    q = anchor(state)[idx]
    if cfg.method == FPA:
        return fpa_batch(inst, q, state.r, Z0, idx, tol, max_iters, record)
    return snm_batch(inst, q, state.r, Z0, idx, tol, max_iters, cfg.newton, record)


def _single(inst, state, s, cfg, z0, record):
    idx = np.array([s])
    z0 = state.x[s] if z0 is None else z0
    Z0 = np.asarray(z0, dtype=float).reshape(1, -1)
    out = run_batch(inst, state, Z0, idx, cfg.inner_tol, cfg.max_inner_iters, cfg, record)
    result = InnerResult(
        out.Z[0], int(out.iters[0]), float(out.residual[0]),
        [float(h[0]) for h in out.history], int(out.fallbacks[0]),
    )
    if result.residual > cfg.inner_tol:
        raise BudgetError(
            f"{cfg.method} on scenario {s} stopped after {result.inner_iters} iterations "
            f"with residual {result.residual:.3e} > {cfg.inner_tol:.1e}",
            residual=result.residual,
        )
    return result


def fpa_solve(inst: SviInstance, state, s: int, cfg: SubsolverConfig, z0=None,
              record=False) -> InnerResult:
    """Fixed-point iteration for scenario ``s`` from ``z0`` (default ``x_k(s)``).

    Returns the last iterate and the size of the last step.
    """
    check_fpa_parameter(inst, state.r, [s])
    cfg = SubsolverConfig(**{**cfg.__dict__, "method": FPA})
    return _single(inst, state, s, cfg, z0, record)


def snm_solve(inst: SviInstance, state, s: int, cfg: SubsolverConfig, z0=None,
              record=False) -> InnerResult:
    """Semismooth Newton for scenario ``s``; any ``r > 0`` is allowed."""
    cfg = SubsolverConfig(**{**cfg.__dict__, "method": SNM})
    return _single(inst, state, s, cfg, z0, record)


def build_certificate(inst: SviInstance, state, Z) -> Certificate:
    """Exact proximal pair from approximate fixed points ``Z`` (one row per scenario).

    ``w_hat = Phi(Z)`` and ``x_hat = w_hat + (F(Z) - F(w_hat)) / r``; the
    projection's normal-cone property then gives

        r (x_k - x_hat) - w_k - F(w_hat) in N_C(w_hat)

    exactly, and ``delta = (F(w_hat) - F(Z)) / r``.
    """
    Z = inst.space.check(Z, "z")
    r = state.r
    FZ = inst.mapping.evaluate(Z)
    w_hat = inst.constraints.project(anchor(state) - FZ / r)
    delta = (inst.mapping.evaluate(w_hat) - FZ) / r
    x_hat = w_hat - delta
    return Certificate(x_hat=x_hat, w_hat=w_hat, delta=delta)


def inclusion_residual(inst: SviInstance, state, cert: Certificate) -> np.ndarray:
    """Per-scenario natural residual of the proximal inclusion at ``(x_hat, w_hat)``.

    ``||w_hat - P_C(w_hat - [F(w_hat) + w_k - r (x_k - x_hat)])||``.
    """
    v = inst.mapping.evaluate(cert.w_hat) + state.w - state.r * (state.x - cert.x_hat)
    return np.linalg.norm(cert.w_hat - inst.constraints.project(cert.w_hat - v), axis=1)
