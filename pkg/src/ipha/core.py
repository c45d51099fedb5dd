"""Inexact progressive hedging for SVIs in extensive form.

One outer iteration at ``(x_k, w_k)``, with ``x_k`` nonanticipative and
``w_k`` a multiplier:

1. every scenario approximately solves its proximal subproblem and the
   result is turned into a certificate ``(x_hat, w_hat, delta)`` that
   satisfies the proximal inclusion exactly;
2. the certificate is accepted when

       ||delta||^2 <= sigma_k^2 (||A||^2 + ||B||^2),
       A = x_k - P_N(x_hat) + P_M(w_hat),
       B = x_k - P_N(w_hat) + P_M(x_hat),

   otherwise the inner solvers continue with a halved residual target;
3. the run stops once ``||B|| <= stop_tol``; else

       x_{k+1} = x_k - tau_k alpha_k (x_k - P_N(x_hat))
       w_{k+1} = w_k + tau_k alpha_k r P_M(w_hat)

   with ``alpha_k = <A, B> / ||A||^2``.

With ``delta = 0`` and ``tau_k alpha_k = 1`` this is exactly classical
progressive hedging.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import ConsistencyError, DegenerateStepError, ParameterError
from .problem import SviInstance, extensive_residual
from .space import ScenarioSpace, inner_product, norm, project_M, project_N
from .subsolvers import (
    FPA,
    Certificate,
    SubsolverConfig,
    anchor,
    build_certificate,
    check_fpa_parameter,
    run_batch,
)

log = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ITERS = "max-iters"
SUBSOLVER_FAILURE = "subsolver-failure"
DIVERGED = "diverged"

MEMBERSHIP_TOL = 1e-10
DEGENERATE_TOL = 1e-14
# Inside solve an accepted step has ||A|| >= stop_tol (1 - sigma) / (1 + sigma),
# so only a rounding-level floor is needed there.
LOOP_DEGENERATE_TOL = 1e-28


def _schedule(value) -> Callable[[int], float]:
    if callable(value):
        return value
    v = float(value)
    return lambda k: v


@dataclass
class IphaParams:
    """Outer-loop parameters.

    ``sigma`` and ``tau`` accept a constant or a callable ``k -> value``.
    ``exact_tau`` picks ``tau_k = 1 / alpha_k`` (clipped to the allowed band),
    which reproduces classical progressive hedging when subproblems are
    solved exactly.  ``simplified_update`` switches to the plain hedging
    update whenever the strengthened acceptance test happens to hold.
    """

    r: float
    sigma_bar: float = 0.9
    theta: float = 0.5
    sigma: float | Callable[[int], float] = 0.5
    tau: float | Callable[[int], float] = 1.0
    stop_tol: float = 1e-5
    max_outer_iters: int = 10_000
    exact_tau: bool = False
    simplified_update: bool = False
    divergence_factor: float = 10.0
    divergence_window: int = 50
    keep_iterates: bool = False

    def __post_init__(self):
        if not self.r > 0:
            raise ParameterError(f"r must be > 0, got {self.r}")
        if not 0 < self.sigma_bar < 1:
            raise ParameterError("sigma_bar must lie in (0, 1)")
        if not 0 < self.theta < 1:
            raise ParameterError("theta must lie in (0, 1)")
        if not self.stop_tol > 0:
            raise ParameterError("stop_tol must be > 0")
        if self.max_outer_iters < 1:
            raise ParameterError("max_outer_iters must be >= 1")
        self.sigma_schedule = _schedule(self.sigma)
        self.tau_schedule = _schedule(self.tau)
        self.sigma_at(0)
        if not self.exact_tau:
            self.tau_at(0)

    def sigma_at(self, k: int) -> float:
        s = float(self.sigma_schedule(k))
        if not 0 <= s < self.sigma_bar:
            raise ParameterError(f"sigma_{k} = {s} outside [0, sigma_bar = {self.sigma_bar})")
        return s

    def tau_at(self, k: int) -> float:
        t = float(self.tau_schedule(k))
        if not 1 - self.theta <= t <= 1 + self.theta:
            raise ParameterError(f"tau_{k} = {t} outside [1 - theta, 1 + theta]")
        return t


@dataclass
class IphaState:
    space: ScenarioSpace
    x: np.ndarray
    w: np.ndarray
    r: float
    k: int = 0
    history: list = field(default_factory=list)
    w_hat_prev: np.ndarray | None = None

    @property
    def z(self) -> np.ndarray:
        return self.x - self.w / self.r

    def check_membership(self, x_scale: float = 0.0, w_scale: float = 0.0) -> None:
        """Raise if ``x`` left ``N`` or ``w`` left ``M`` beyond rounding level.

        ``x_scale`` and ``w_scale`` add the size of the last increment to the
        reference magnitude, since rounding in a large step is relative to it.
        """
        sp = self.space
        ex = norm(self.x - project_N(self.x, sp), sp)
        if ex > MEMBERSHIP_TOL * (1.0 + norm(self.x, sp) + x_scale):
            raise ConsistencyError(f"iterate {self.k}: x left N by {ex:.3e}")
        ew = norm(project_N(self.w, sp), sp)
        if ew > MEMBERSHIP_TOL * (1.0 + norm(self.w, sp) + w_scale):
            raise ConsistencyError(f"iterate {self.k}: w left M by {ew:.3e}")

    def scrub(self) -> None:
        """Remove rounding drift so errors do not accumulate over iterations."""
        self.x = project_N(self.x, self.space)
        self.w = project_M(self.w, self.space)


class StepVectors(NamedTuple):
    """``A = x_k - P_N(x_hat) + P_M(w_hat)`` and ``B = x_k - P_N(w_hat) + P_M(x_hat)``."""

    a: np.ndarray
    b: np.ndarray
    pn_x_hat: np.ndarray
    pm_w_hat: np.ndarray


def step_vectors(state: IphaState, cert: Certificate) -> StepVectors:
    sp = state.space
    pn_x = project_N(cert.x_hat, sp)
    pn_w = project_N(cert.w_hat, sp)
    pm_x = cert.x_hat - pn_x
    pm_w = cert.w_hat - pn_w
    return StepVectors(state.x - pn_x + pm_w, state.x - pn_w + pm_x, pn_x, pm_w)


class ToleranceResult(NamedTuple):
    accepted: bool
    delta_norm: float
    a_norm: float
    b_norm: float


def tolerance_check(state: IphaState, cert: Certificate, sigma_k: float,
                    vectors: StepVectors | None = None) -> ToleranceResult:
    """Relative-error acceptance test ``||delta||^2 <= sigma^2 (||A||^2 + ||B||^2)``."""
    sp = state.space
    v = vectors or step_vectors(state, cert)
    d2 = inner_product(cert.delta, cert.delta, sp)
    a2 = inner_product(v.a, v.a, sp)
    b2 = inner_product(v.b, v.b, sp)
    ok = d2 <= sigma_k**2 * (a2 + b2)
    return ToleranceResult(bool(ok), math.sqrt(d2), math.sqrt(a2), math.sqrt(b2))


def stop_quantity(state: IphaState, cert: Certificate, vectors: StepVectors | None = None) -> float:
    """``||x_k - P_N(w_hat) + P_M(x_hat)||``, which equals ``||z_k - z_hat||``."""
    v = vectors or step_vectors(state, cert)
    return norm(v.b, state.space)


def compute_alpha(state: IphaState, cert: Certificate, sigma_k: float | None = None,
                  vectors: StepVectors | None = None, degenerate_tol: float = DEGENERATE_TOL) -> float:
    """Step length ``<A, B> / ||A||^2`` of the hyperplane projection.

    Raises :class:`DegenerateStepError` when ``||A||^2`` falls below
    ``degenerate_tol * (1 + ||x_k||)^2``.  When ``sigma_k`` is given and
    ``||delta|| <= sigma_k ||B||`` holds, the lower bound
    ``alpha >= 1 / (1 + sigma_k)`` is enforced as a sanity check.
    """
    sp = state.space
    v = vectors or step_vectors(state, cert)
    a2 = inner_product(v.a, v.a, sp)
    scale = (1.0 + norm(state.x, sp)) ** 2
    if a2 < degenerate_tol * scale:
        raise DegenerateStepError(
            f"||A||^2 = {a2:.3e} vanished at iteration {state.k}; re-check the stop condition"
        )
    alpha = inner_product(v.a, v.b, sp) / a2
    if sigma_k is not None:
        dn = norm(cert.delta, sp)
        if dn <= sigma_k * norm(v.b, sp) and alpha < 1.0 / (1.0 + sigma_k) - 1e-9:
            raise ConsistencyError(
                f"alpha = {alpha!r} below 1/(1+sigma) = {1 / (1 + sigma_k)!r} "
                "although the strengthened test holds"
            )
    return alpha


def actualize(state: IphaState, cert: Certificate, tau_k: float, alpha_k: float,
              vectors: StepVectors | None = None) -> IphaState:
    """Hyperplane-projection update; the new iterate stays in ``N x M``."""
    v = vectors or step_vectors(state, cert)
    step = tau_k * alpha_k
    dx = step * (state.x - v.pn_x_hat)
    dw = step * state.r * v.pm_w_hat
    new = IphaState(
        space=state.space,
        x=state.x - dx,
        w=state.w + dw,
        r=state.r,
        k=state.k + 1,
        history=state.history,
        w_hat_prev=cert.w_hat,
    )
    sp = state.space
    new.check_membership(norm(dx, sp), norm(dw, sp))
    new.scrub()
    return new


def hedging_update(state: IphaState, cert: Certificate, vectors: StepVectors | None = None) -> IphaState:
    """Plain progressive-hedging update ``x = P_N(x_hat)``, ``w += r P_M(w_hat)``."""
    v = vectors or step_vectors(state, cert)
    dw = state.r * v.pm_w_hat
    new = IphaState(state.space, v.pn_x_hat.copy(), state.w + dw,
                    state.r, state.k + 1, state.history, cert.w_hat)
    new.check_membership(0.0, norm(dw, state.space))
    new.scrub()
    return new


@dataclass
class IterationInfo:
    """What the progress callback receives after each outer iteration."""

    k: int
    x: np.ndarray
    w: np.ndarray
    certificate: Certificate
    stop_quantity: float
    delta_norm: float
    alpha: float | None
    tau: float | None
    residual: float
    x_next: np.ndarray | None = None
    w_next: np.ndarray | None = None


@dataclass
class SolveResult:
    x: np.ndarray
    w: np.ndarray
    status: str
    history: list
    residual: float
    stop_quantity: float
    iterations: int
    inner_iters_total: int
    diagnostics: list = field(default_factory=list)
    iterates: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED


def _initial_point(inst, x0, w0):
    sp = inst.space
    x = sp.zeros() if x0 is None else sp.check(x0, "x0").copy()
    w = sp.zeros() if w0 is None else sp.check(w0, "w0").copy()
    px = project_N(x, sp)
    if norm(x - px, sp) > MEMBERSHIP_TOL * (1.0 + norm(x, sp)):
        warnings.warn("x0 is not nonanticipative; projecting it onto N", stacklevel=3)
        x = px
    pw = project_N(w, sp)
    if norm(pw, sp) > MEMBERSHIP_TOL * (1.0 + norm(w, sp)):
        warnings.warn("w0 is not a multiplier; projecting it onto M", stacklevel=3)
        w = w - pw
    return x, w


def solve(inst: SviInstance, params: IphaParams, subsolver: SubsolverConfig | None = None,
          x0=None, w0=None, callback: Callable[[IterationInfo], None] | None = None) -> SolveResult:
    """Run the inexact progressive hedging loop.

    Returns the last iterate with its status: ``converged`` when the stop
    quantity fell below ``stop_tol``, otherwise ``max-iters``,
    ``subsolver-failure`` (inner budget exhausted, per-scenario diagnostics
    attached) or ``diverged`` (stop quantity stuck far above its running
    minimum).
    """
    cfg = subsolver or SubsolverConfig()
    sp = inst.space
    r = params.r
    if cfg.method == FPA:
        check_fpa_parameter(inst, r)
    if inst.certificate is not None and not inst.certificate.monotone:
        log.warning("solving a non-monotone instance; convergence is not guaranteed")

    x, w = _initial_point(inst, x0, w0)
    state = IphaState(sp, x, w, r)
    idx = np.arange(sp.scenario_count)
    history = state.history
    iterates = [(x.copy(), w.copy())] if params.keep_iterates else []
    status = MAX_ITERS
    diagnostics: list = []
    inner_total = 0
    prev_stop = None
    best_stop = math.inf
    above = 0
    last_stop = math.nan

    for k in range(params.max_outer_iters):
        sigma_k = params.sigma_at(k)
        Z = state.w_hat_prev if (cfg.warm_start and state.w_hat_prev is not None) else state.x
        if cfg.inner_rel == 0:
            target = cfg.inner_tol
        else:
            if prev_stop is None:
                q = anchor(state)
                step = Z - inst.constraints.project(q - inst.mapping.evaluate(Z) / r)
                ref = float(np.max(np.linalg.norm(step, axis=1)))
            else:
                ref = prev_stop
            target = max(cfg.inner_tol, cfg.inner_rel * ref)
        used = np.zeros(sp.scenario_count, dtype=int)
        rounds = 0
        failed = False
        while True:
            rounds += 1
            budget = cfg.max_inner_iters - int(used.max())
            br = run_batch(inst, state, Z, idx, target, max(budget, 0), cfg)
            used += br.iters
            Z = br.Z
            if np.any(br.residual > target):
                diagnostics = br.diagnostics(idx, cfg.method)
                failed = True
                break
            cert = build_certificate(inst, state, Z)
            vec = step_vectors(state, cert)
            tol = tolerance_check(state, cert, sigma_k, vec)
            if tol.accepted:
                break
            if target <= cfg.inner_tol:
                if tol.b_norm <= params.stop_tol:
                    break
                diagnostics = br.diagnostics(idx, cfg.method)
                failed = True
                break
            target = max(0.5 * target, cfg.inner_tol)
        inner_total += int(used.sum())
        if failed:
            status = SUBSOLVER_FAILURE
            log.warning("iteration %d: inner solvers exhausted their budget", k)
            break
        cert.accepted = tol.accepted
        stop = tol.b_norm
        last_stop = stop
        residual = extensive_residual(inst, state.x, state.w)
        record = {
            "k": k,
            "stop_quantity": stop,
            "stop_quantity_alt_sign": norm(state.x - project_N(cert.w_hat, sp)
                                           - (cert.x_hat - project_N(cert.x_hat, sp)), sp),
            "alt_stop_quantity": norm(state.x - vec.pn_x_hat - vec.pm_w_hat, sp),
            "delta_norm": tol.delta_norm,
            "a_norm": tol.a_norm,
            "sigma": sigma_k,
            "alpha": math.nan,
            "tau": math.nan,
            "inner_iters": int(used.sum()),
            "inner_iters_max": int(used.max()),
            "inner_rounds": rounds,
            "inner_target": target,
            "residual": residual,
            "accepted": tol.accepted,
        }
        history.append(record)
        if stop <= params.stop_tol:
            status = CONVERGED
            if callback:
                callback(IterationInfo(k, state.x, state.w, cert, stop, tol.delta_norm,
                                       None, None, residual))
            break

        strengthened = tol.delta_norm <= sigma_k * stop
        alpha = compute_alpha(state, cert, sigma_k, vec, LOOP_DEGENERATE_TOL)
        if params.simplified_update and strengthened:
            tau = 1.0 / alpha
            new = hedging_update(state, cert, vec)
        else:
            if params.exact_tau:
                tau = min(max(1.0 / alpha, 1 - params.theta), 1 + params.theta)
            else:
                tau = params.tau_at(k)
            if not alpha > 0:
                raise ConsistencyError(f"alpha_{k} = {alpha!r} is not positive")
            new = actualize(state, cert, tau, alpha, vec)
        record["alpha"] = alpha
        record["tau"] = tau
        if callback:
            callback(IterationInfo(k, state.x, state.w, cert, stop, tol.delta_norm,
                                   alpha, tau, residual, new.x, new.w))
        state = new
        if params.keep_iterates:
            iterates.append((state.x.copy(), state.w.copy()))
        prev_stop = stop

        best_stop = min(best_stop, stop)
        above = above + 1 if stop > params.divergence_factor * best_stop else 0
        if above >= params.divergence_window:
            status = DIVERGED
            log.warning("iteration %d: stop quantity %.3e stuck above 10x its minimum %.3e",
                        k, stop, best_stop)
            break

    return SolveResult(
        x=state.x,
        w=state.w,
        status=status,
        history=history,
        residual=extensive_residual(inst, state.x, state.w),
        stop_quantity=last_stop,
        iterations=len(history),
        inner_iters_total=inner_total,
        diagnostics=diagnostics,
        iterates=iterates,
    )
