"""Two-stage, two-player energy production game.

Player ``i`` chooses a stage-1 production vector ``x_i^1`` (length ``m_i``)
before the scenario is revealed and a stage-2 vector ``x_i^2(s)`` after.
Prices are linear in total production,

    p^1 = alpha1 (a1 - sum x_1^1 - sum x_2^1),
    p^2(s) = alpha2(s) (a2(s) - sum x_1^2 - sum x_2^2),

and player ``i`` minimizes

    g_i = c1_i . x_i^1 - p^1 sum x_i^1 + c2_i(s) . x_i^2 - p^2(s) sum x_i^2

subject to ``x_i^1, x_i^2 >= 0`` and ``x_i^1[j] + x_i^2[j] <= cap_i(s)[j]``.

Decision vectors are laid out stage by stage as
``(x_1^1, x_2^1, x_1^2, x_2^2)``, so ``n = 2 (m1 + m2)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import numpy as np

from .errors import ParameterError, SchemaError
from .problem import AffineMapping, CappedPairs, Orthant, SviInstance, check_monotone
from .space import ScenarioSpace

log = logging.getLogger(__name__)

PARAMS_SCHEMA = "ipha-nash-params/1"
MIN_PROBABILITY = 1e-6


@dataclass
class NashGameParams:
    """Game data; per-scenario arrays have the scenario as first axis."""

    m1: int
    m2: int
    alpha1: float
    a1: float
    c1_1: np.ndarray  # (m1,)
    c1_2: np.ndarray  # (m2,)
    alpha2: np.ndarray  # (S,)
    a2: np.ndarray  # (S,)
    c2_1: np.ndarray  # (S, m1)
    c2_2: np.ndarray  # (S, m2)
    cap_1: np.ndarray  # (S, m1)
    cap_2: np.ndarray  # (S, m2)
    probabilities: np.ndarray  # (S,)

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("m1", "m2"):
                setattr(self, f.name, int(v))
            elif f.name in ("alpha1", "a1"):
                setattr(self, f.name, float(v))
            else:
                setattr(self, f.name, np.asarray(v, dtype=float))
        self.validate()

    @property
    def scenario_count(self) -> int:
        return self.probabilities.size

    @property
    def n(self) -> int:
        return 2 * (self.m1 + self.m2)

    def validate(self) -> None:
        m1, m2, S = self.m1, self.m2, self.scenario_count
        if m1 < 1 or m2 < 1:
            raise ParameterError("m1 and m2 must be positive")
        shapes = {
            "c1_1": (m1,), "c1_2": (m2,), "alpha2": (S,), "a2": (S,),
            "c2_1": (S, m1), "c2_2": (S, m2), "cap_1": (S, m1), "cap_2": (S, m2),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ParameterError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        for f in fields(self):
            v = np.asarray(getattr(self, f.name), dtype=float)
            if not np.all(np.isfinite(v)) or np.any(v <= 0):
                raise ParameterError(f"{f.name} must be finite and positive")

    def to_dict(self) -> dict:
        d = {"schema": PARAMS_SCHEMA}
        for f in fields(self):
            v = getattr(self, f.name)
            d[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NashGameParams":
        if d.get("schema") != PARAMS_SCHEMA:
            raise SchemaError(f"expected schema {PARAMS_SCHEMA!r}, got {d.get('schema')!r}")
        try:
            return cls(**{f.name: d[f.name] for f in fields(cls)})
        except KeyError as e:
            raise SchemaError(f"nash params: missing field {e.args[0]!r}") from None


def _price_block(alpha: float, m1: int, m2: int) -> np.ndarray:
    """Jacobian of the stage gradient: ``2 alpha`` on own quantities, ``alpha`` on the rival's."""
    m = m1 + m2
    K = np.ones((m, m))
    K[:m1, :m1] = 2.0
    K[m1:, m1:] = 2.0
    return alpha * K


def game_space(params: NashGameParams) -> ScenarioSpace:
    m = params.m1 + params.m2
    return ScenarioSpace.two_stage(params.probabilities, m, m)


def assemble_instance(params: NashGameParams, name: str = "nash") -> SviInstance:
    """Affine SVI ``F(x, s) = M_s x + b_s`` stacking both players' cost gradients."""
    m1, m2, S = params.m1, params.m2, params.scenario_count
    m = m1 + m2
    n = 2 * m
    M = np.zeros((S, n, n))
    b = np.zeros((S, n))
    K1 = _price_block(params.alpha1, m1, m2)
    b1 = np.concatenate([params.c1_1, params.c1_2]) - params.alpha1 * params.a1
    for s in range(S):
        M[s, :m, :m] = K1
        M[s, m:, m:] = _price_block(params.alpha2[s], m1, m2)
        b[s, :m] = b1
        b[s, m:] = np.concatenate([params.c2_1[s], params.c2_2[s]]) - params.alpha2[s] * params.a2[s]
    caps = np.concatenate([params.cap_1, params.cap_2], axis=1)
    cons = CappedPairs(np.arange(m), np.arange(m, n), caps)
    return SviInstance(game_space(params), AffineMapping(M, b), cons, name=name)


def player_costs(params: NashGameParams, X, s: int) -> tuple[np.ndarray, np.ndarray]:
    """``(g_1, g_2)`` at the rows of ``X`` (shape ``(P, n)``) in scenario ``s``."""
    m1, m2 = params.m1, params.m2
    m = m1 + m2
    X = np.atleast_2d(X)
    x11, x21 = X[:, :m1], X[:, m1:m]
    x12, x22 = X[:, m:m + m1], X[:, m + m1:]
    p1 = params.alpha1 * (params.a1 - x11.sum(1) - x21.sum(1))
    p2 = params.alpha2[s] * (params.a2[s] - x12.sum(1) - x22.sum(1))
    g1 = x11 @ params.c1_1 - p1 * x11.sum(1) + x12 @ params.c2_1[s] - p2 * x12.sum(1)
    g2 = x21 @ params.c1_2 - p1 * x21.sum(1) + x22 @ params.c2_2[s] - p2 * x22.sum(1)
    return g1, g2


def numerical_F(params: NashGameParams, X, s: int, h: float = 1e-3) -> np.ndarray:
    """Central-difference estimate of ``F`` built from the cost functions alone.

    Each coordinate is differentiated through the cost of the player who
    owns it; this never touches the assembled matrices.
    """
    m1, m2 = params.m1, params.m2
    m = m1 + m2
    X = np.atleast_2d(np.asarray(X, dtype=float))
    owner = np.array(([0] * m1 + [1] * m2) * 2)
    out = np.empty_like(X)
    for j in range(X.shape[1]):
        e = np.zeros(X.shape[1])
        e[j] = h
        gp = player_costs(params, X + e, s)[owner[j]]
        gm = player_costs(params, X - e, s)[owner[j]]
        out[:, j] = (gp - gm) / (2 * h)
    return out


@dataclass
class NashRanges:
    """Uniform sampling intervals for :func:`random_family`.

    The defaults make ``max_s ||M_s||`` a few hundred to about a thousand at
    ``m1 = m2 = 10`` and leave the capacity caps partly binding.
    """

    alpha1: tuple[float, float] = (10.0, 40.0)
    a1: tuple[float, float] = (20.0, 60.0)
    c1: tuple[float, float] = (10.0, 3000.0)
    alpha2: tuple[float, float] = (10.0, 40.0)
    a2: tuple[float, float] = (20.0, 60.0)
    c2: tuple[float, float] = (10.0, 3000.0)
    cap: tuple[float, float] = (30.0, 80.0)
    cost_gap: float = 0.2

    def __post_init__(self):
        if not 0 <= self.cost_gap < 1:
            raise ParameterError("cost_gap must lie in [0, 1)")
        for f in fields(self):
            if f.name == "cost_gap":
                continue
            lo, hi = getattr(self, f.name)
            if not (0 < lo < hi and np.isfinite(hi)):
                raise ParameterError(f"range {f.name} = {(lo, hi)} must satisfy 0 < lo < hi")

    @classmethod
    def from_dict(cls, d: dict | None) -> "NashRanges":
        if not d:
            return cls()
        return cls(**{k: v if k == "cost_gap" else tuple(v) for k, v in d.items()})

    def to_dict(self) -> dict:
        d = {f.name: list(getattr(self, f.name)) for f in fields(self) if f.name != "cost_gap"}
        d["cost_gap"] = self.cost_gap
        return d


def separated_uniform(rng, lo, hi, size, gap_fraction):
    """Uniform draws on ``[lo, hi]`` conditioned on a minimum pairwise gap.

    The gap is ``gap_fraction * (hi - lo) / m`` for vectors of length ``m``
    (last axis).  Sorted uniform points on the shortened interval are spread
    by ``i * gap`` and then shuffled, which samples the conditional law exactly.
    """
    size = (size,) if np.isscalar(size) else tuple(size)
    m = size[-1]
    gap = gap_fraction * (hi - lo) / m
    u = np.sort(rng.uniform(lo, hi - (m - 1) * gap, size), axis=-1)
    u = u + gap * np.arange(m)
    return rng.permuted(u, axis=-1)


def random_family(seed, scenario_count: int, m1: int, m2: int,
                  ranges: NashRanges | None = None) -> NashGameParams:
    """Sample a game reproducibly from ``numpy.random.default_rng(seed)`` (PCG64).

    Probabilities come from a flat Dirichlet, redrawn until all exceed
    ``1e-6``; every other parameter is uniform on its range, except that a
    player's unit costs within one stage keep a minimum spacing (see
    :func:`separated_uniform`).  Nearly tied costs make the equilibrium
    almost degenerate and slow every proximal method to a crawl.
    """
    if scenario_count < 1:
        raise ParameterError("scenario_count must be >= 1")
    ranges = ranges or NashRanges()
    rng = np.random.default_rng(seed)
    S = scenario_count
    while True:
        p = rng.dirichlet(np.ones(S))
        if np.all(p > MIN_PROBABILITY):
            break
    p = p / p.sum()

    def u(rg, size=None):
        return rng.uniform(rg[0], rg[1], size)

    def c(rg, size):
        return separated_uniform(rng, rg[0], rg[1], size, ranges.cost_gap)

    return NashGameParams(
        m1=m1, m2=m2,
        alpha1=u(ranges.alpha1), a1=u(ranges.a1),
        c1_1=c(ranges.c1, m1), c1_2=c(ranges.c1, m2),
        alpha2=u(ranges.alpha2, S), a2=u(ranges.a2, S),
        c2_1=c(ranges.c2, (S, m1)), c2_2=c(ranges.c2, (S, m2)),
        cap_1=u(ranges.cap, (S, m1)), cap_2=u(ranges.cap, (S, m2)),
        probabilities=p,
    )


def sample_monotone_instance(seed, scenario_count, m1, m2, ranges=None, max_draws=100):
    """Draw games from ``seed`` until the assembled instance is monotone.

    Returns ``(params, instance, rejections)``.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    for draw, child in enumerate([ss] + ss.spawn(max_draws - 1)):
        params = random_family(child, scenario_count, m1, m2, ranges)
        inst = assemble_instance(params)
        if check_monotone(inst).monotone:
            if draw:
                log.info("rejected %d non-monotone draws", draw)
            return params, inst, draw
    raise ParameterError(f"no monotone instance in {max_draws} draws")


def counterexample_instance() -> SviInstance:
    """Two equiprobable scenarios, ``C = R^2_+``, ``F(x, s) = M_s x + b_s`` with

    ``M_s = [[2, 1], [1 + s, 2 - s]]`` and ``b_s = (1, 1 + s)`` for ``s in {0, 1}``.

    Decisions are single-stage, i.e. constant across scenarios.
    """
    M = np.array([[[2.0, 1.0], [1.0 + s, 2.0 - s]] for s in (0, 1)])
    b = np.array([[1.0, 1.0 + s] for s in (0, 1)])
    space = ScenarioSpace.single_stage([0.5, 0.5], 2)
    return SviInstance(space, AffineMapping(M, b), Orthant(), name="counterexample")
