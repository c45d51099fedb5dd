"""Finite scenario spaces and the decision-function space over them.

A decision function (policy) is stored as a dense ``(S, n)`` array: row ``s``
holds the decision vector of scenario ``s``, with columns grouped by stage.
Nonanticipativity is encoded by one partition of the scenario indices per
stage; two scenarios share a class at stage ``k`` iff they cannot be told
apart before the stage-``k`` decision is made.

Reductions over scenarios go through numpy matrix products and ``np.sum``
with a fixed scenario ordering, so results are reproducible run to run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ParameterError

PROB_SUM_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class ScenarioSpace:
    """Finite probability space with a stage structure.

    Parameters
    ----------
    probabilities : sequence of float
        Strictly positive, summing to one within ``1e-12``.
    stage_dims : sequence of int
        Decision dimension of each stage; ``n = sum(stage_dims)``.
    info_partitions : sequence of sequence of sequence of int
        ``info_partitions[k]`` lists the information classes of stage ``k``
        as lists of scenario indices.
    """

    probabilities: np.ndarray
    stage_dims: tuple[int, ...]
    info_partitions: tuple[tuple[tuple[int, ...], ...], ...]
    _labels: tuple[np.ndarray, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=float).copy()
        if p.ndim != 1 or p.size == 0:
            raise ParameterError("probabilities must be a nonempty vector")
        if not np.all(np.isfinite(p)) or np.any(p <= 0):
            raise ParameterError("every scenario probability must be > 0")
        if abs(p.sum() - 1.0) > PROB_SUM_TOL:
            raise ParameterError(
                f"probabilities sum to {p.sum()!r}, not 1 (no renormalization is done)"
            )
        p.setflags(write=False)
        object.__setattr__(self, "probabilities", p)

        dims = tuple(int(d) for d in self.stage_dims)
        if not dims or any(d <= 0 for d in dims):
            raise ParameterError("stage_dims must be positive integers")
        object.__setattr__(self, "stage_dims", dims)

        parts = tuple(
            tuple(tuple(int(i) for i in cls) for cls in stage)
            for stage in self.info_partitions
        )
        if len(parts) != len(dims):
            raise ParameterError(
                f"{len(parts)} partitions given for {len(dims)} stages"
            )
        S = p.size
        labels = []
        for k, stage in enumerate(parts):
            lab = np.full(S, -1, dtype=np.intp)
            for c, cls in enumerate(stage):
                if not cls:
                    raise ParameterError(f"stage {k}: empty information class")
                for i in cls:
                    if not 0 <= i < S:
                        raise ParameterError(f"stage {k}: scenario index {i} out of range")
                    if lab[i] >= 0:
                        raise ParameterError(f"stage {k}: scenario {i} listed twice")
                    lab[i] = c
            if np.any(lab < 0):
                missing = np.flatnonzero(lab < 0).tolist()
                raise ParameterError(f"stage {k}: scenarios {missing} not covered")
            lab.setflags(write=False)
            labels.append(lab)
        if len(parts[0]) != 1:
            raise ParameterError("stage-1 partition must be a single class")
        for k in range(1, len(parts)):
            # each stage-k class must sit inside one stage-(k-1) class
            for cls in parts[k]:
                if len({int(labels[k - 1][i]) for i in cls}) != 1:
                    raise ParameterError(
                        f"stage {k} partition does not refine stage {k - 1}"
                    )
        object.__setattr__(self, "info_partitions", parts)
        object.__setattr__(self, "_labels", tuple(labels))

    def __eq__(self, other):
        if not isinstance(other, ScenarioSpace):
            return NotImplemented
        return (
            self.stage_dims == other.stage_dims
            and self.info_partitions == other.info_partitions
            and np.array_equal(self.probabilities, other.probabilities)
        )

    def __hash__(self):
        return hash((self.stage_dims, self.info_partitions, self.probabilities.tobytes()))

    # -- constructors -------------------------------------------------

    @classmethod
    def two_stage(cls, probabilities, n1: int, n2: int) -> "ScenarioSpace":
        """Here-and-now first stage, fully revealed second stage."""
        S = len(probabilities)
        return cls(
            probabilities,
            (n1, n2),
            ((tuple(range(S)),), tuple((i,) for i in range(S))),
        )

    @classmethod
    def single_stage(cls, probabilities, n: int) -> "ScenarioSpace":
        """All decisions must be identical across scenarios."""
        S = len(probabilities)
        return cls(probabilities, (n,), ((tuple(range(S)),),))

    @classmethod
    def from_tree(cls, probabilities, stage_dims, histories) -> "ScenarioSpace":
        """Build partitions from per-scenario observation histories.

        ``histories[s]`` is the sequence ``(xi_1, ..., xi_N)`` of scenario
        ``s``; stage-``k`` classes group scenarios sharing the first ``k``
        entries (stage index starting at 0).
        """
        N = len(stage_dims)
        parts = []
        for k in range(N):
            groups: dict[tuple, list[int]] = {}
            for s, h in enumerate(histories):
                groups.setdefault(tuple(h[:k]), []).append(s)
            parts.append(tuple(tuple(g) for g in groups.values()))
        return cls(probabilities, tuple(stage_dims), tuple(parts))

    # -- shape helpers ------------------------------------------------

    @property
    def scenario_count(self) -> int:
        return self.probabilities.size

    @property
    def n(self) -> int:
        return sum(self.stage_dims)

    @property
    def stage_count(self) -> int:
        return len(self.stage_dims)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.scenario_count, self.n)

    def stage_slice(self, k: int) -> slice:
        start = sum(self.stage_dims[:k])
        return slice(start, start + self.stage_dims[k])

    def zeros(self) -> np.ndarray:
        return np.zeros(self.shape)

    def check(self, u, name: str = "policy") -> np.ndarray:
        """Return ``u`` as a float array after validating its shape and values."""
        a = np.asarray(u, dtype=float)
        if a.ndim != 2 or a.shape[0] != self.scenario_count:
            raise DimensionError(
                f"{name}: expected {self.scenario_count} scenario rows, got shape {a.shape}"
            )
        if a.shape[1] != self.n:
            raise DimensionError(
                f"{name}: scenario 0 has {a.shape[1]} coordinates, stages "
                f"{self.stage_dims} need {self.n}"
            )
        if not np.all(np.isfinite(a)):
            s, j = np.argwhere(~np.isfinite(a))[0]
            k = int(np.searchsorted(np.cumsum(self.stage_dims), j, side="right"))
            raise DimensionError(f"{name}: non-finite entry at scenario {s}, stage {k}")
        return a

    def to_dict(self) -> dict:
        return {
            "scenario_count": self.scenario_count,
            "probabilities": self.probabilities.tolist(),
            "stage_dims": list(self.stage_dims),
            "info_partitions": [[list(c) for c in st] for st in self.info_partitions],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpace":
        space = cls(d["probabilities"], tuple(d["stage_dims"]), d["info_partitions"])
        if "scenario_count" in d and int(d["scenario_count"]) != space.scenario_count:
            raise DimensionError(
                f"scenario_count {d['scenario_count']} disagrees with "
                f"{space.scenario_count} probabilities"
            )
        return space


def inner_product(a, b, space: ScenarioSpace) -> float:
    """Expectational inner product ``sum_s p_s <a_s, b_s>``."""
    a = space.check(a, "a")
    b = space.check(b, "b")
    return float(space.probabilities @ np.einsum("ij,ij->i", a, b))


def norm(a, space: ScenarioSpace) -> float:
    return float(np.sqrt(max(inner_product(a, a, space), 0.0)))


def project_N(u, space: ScenarioSpace) -> np.ndarray:
    """Orthogonal projection onto the nonanticipative policies.

    Each stage block is replaced by its probability-weighted mean over the
    information class the scenario belongs to at that stage.
    """
    u = space.check(u, "u")
    p = space.probabilities
    out = u.copy()
    for k, lab in enumerate(space._labels):
        n_cls = len(space.info_partitions[k])
        if n_cls == space.scenario_count:
            continue
        sl = space.stage_slice(k)
        block = u[:, sl]
        onehot = np.zeros((space.scenario_count, n_cls))
        onehot[np.arange(space.scenario_count), lab] = 1.0
        mass = onehot.T @ p
        means = (onehot.T @ (p[:, None] * block)) / mass[:, None]
        out[:, sl] = means[lab]
    return out


def project_M(u, space: ScenarioSpace) -> np.ndarray:
    """Projection onto the multiplier space, the complement of ``project_N``."""
    u = space.check(u, "u")
    return u - project_N(u, space)


def mr_norm(x, w, r: float, space: ScenarioSpace) -> float:
    """``sqrt(||x||^2 + ||w||^2 / r^2)`` in the expectational norm."""
    if not r > 0:
        raise ParameterError(f"r must be positive, got {r}")
    return float(np.sqrt(inner_product(x, x, space) + inner_product(w, w, space) / r**2))
