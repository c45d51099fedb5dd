"""Seeded experiment sweeps over the random Nash game family.

A config lists scenario counts, ``(m1, m2)`` pairs and solver arms; every
combination is a cell, and every cell is run ``repetitions`` times.  The
instance of repetition ``rep`` at ``(S, m1, m2)`` comes from

    SeedSequence(master_seed, spawn_key=(S, m1, m2, rep)).generate_state(1)[0]

so both arms see the same games and adding grid points never changes the
games drawn for existing ones.  The FPA arm uses ``r = max_s ||M_s|| + 0.1 + j``
and the SNM arm ``r = j`` for each offset ``j``.
"""

from __future__ import annotations

import csv
import itertools
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import CONVERGED, IphaParams, solve
from .errors import IphaError, ParameterError, SchemaError
from .io import EXPERIMENT_SCHEMA
from .nash import NashRanges, sample_monotone_instance
from .problem import SviInstance, residual_terms
from .space import norm, project_N
from .subsolvers import FPA, SNM, SubsolverConfig

KINDS = ("scenario-sweep", "dimension-sweep", "r-sweep", "single-run")
FPA_MARGIN = 0.1

CSV_COLUMNS = (
    "experiment", "cell-id", "seed", "method", "scenarios", "m1", "m2", "r", "sigma",
    "outer_iters", "inner_iters_total", "wall_ms", "stop_quantity", "residual", "status",
)
_INT_COLUMNS = {"seed", "scenarios", "m1", "m2", "outer_iters", "inner_iters_total"}
_FLOAT_COLUMNS = {"r", "sigma", "wall_ms", "stop_quantity", "residual"}
TIMING_COLUMNS = ("wall_ms",)

AGGREGATE_COLUMNS = (
    "experiment", "cell-id", "method", "scenarios", "m1", "m2", "offset", "runs",
    "converged", "failures", "mean_outer_iters", "mean_inner_iters", "mean_wall_ms",
)


@dataclass
class Arm:
    """One solver arm: a method and its ``r`` offsets ``j``."""

    method: str
    offsets: list[float]

    def __post_init__(self):
        self.method = self.method.upper()
        if self.method not in (FPA, SNM):
            raise ParameterError(f"unknown arm method {self.method!r}")
        self.offsets = [float(j) for j in self.offsets]
        if not self.offsets:
            raise ParameterError(f"arm {self.method}: offsets must be nonempty")
        if self.method == SNM and min(self.offsets) <= 0:
            raise ParameterError("SNM arm uses r = j, so every offset must be > 0")
        if self.method == FPA and min(self.offsets) < 0:
            raise ParameterError("FPA offsets must be >= 0 so that r > max ||M_s||")


@dataclass
class ExperimentConfig:
    name: str
    kind: str = "scenario-sweep"
    scenarios: list[int] = field(default_factory=lambda: [10, 25, 50, 100])
    dims: list[tuple[int, int]] = field(default_factory=lambda: [(10, 10)])
    arms: list[Arm] = field(default_factory=lambda: [Arm(FPA, [0.0]), Arm(SNM, [20.0])])
    sigma: float = 0.5
    tau: float = 1.0
    stop_tol: float = 1e-5
    repetitions: int = 3
    master_seed: int = 0
    max_outer_iters: int = 20_000
    inner_tol: float = 1e-9
    max_inner_iters: int = 100_000
    ranges: NashRanges = field(default_factory=NashRanges)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"experiment kind must be one of {KINDS}, got {self.kind!r}")
        self.scenarios = [int(s) for s in self.scenarios]
        self.dims = [(int(a), int(b)) for a, b in self.dims]
        self.arms = [a if isinstance(a, Arm) else Arm(**a) for a in self.arms]
        if not (self.scenarios and self.dims and self.arms):
            raise ParameterError("scenario, dimension and arm grids must be nonempty")
        if min(self.scenarios) < 1 or min(min(d) for d in self.dims) < 1:
            raise ParameterError("scenario counts and dimensions must be positive")
        if self.repetitions < 1:
            raise ParameterError("repetitions must be >= 1")
        if not self.stop_tol > 0:
            raise ParameterError("stop_tol must be > 0")
        if self.kind == "single-run":
            cells = len(self.scenarios) * len(self.dims) * sum(len(a.offsets) for a in self.arms)
            if cells != len(self.arms):
                raise ParameterError("single-run needs one scenario count, one dimension "
                                     "pair and one offset per arm")
        # parameter ranges are checked here rather than at the first solve
        IphaParams(r=1.0, sigma=self.sigma, tau=self.tau, stop_tol=self.stop_tol)

    def cells(self) -> list["Cell"]:
        out = []
        for S, (m1, m2), arm in itertools.product(self.scenarios, self.dims, self.arms):
            for j in arm.offsets:
                out.append(Cell(len(out), arm.method, S, m1, m2, j))
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = [list(p) for p in self.dims]
        d["ranges"] = self.ranges.to_dict()
        return {"schema": EXPERIMENT_SCHEMA, **d}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if d.get("schema") != EXPERIMENT_SCHEMA:
            raise SchemaError(f"field 'schema' is {d.get('schema')!r}, expected {EXPERIMENT_SCHEMA!r}")
        d = {k: v for k, v in d.items() if k != "schema"}
        known = {f for f in cls.__dataclass_fields__}
        extra = sorted(set(d) - known)
        if extra:
            raise SchemaError(f"unknown experiment fields {extra}")
        if "name" not in d:
            raise SchemaError("missing field 'name'")
        if "ranges" in d:
            d["ranges"] = NashRanges.from_dict(d["ranges"])
        return cls(**d)


@dataclass(frozen=True)
class Cell:
    index: int
    method: str
    scenarios: int
    m1: int
    m2: int
    offset: float

    @property
    def cell_id(self) -> str:
        return f"S{self.scenarios}-m{self.m1}x{self.m2}-{self.method}-j{self.offset:g}"


@dataclass
class RunRecord:
    experiment: str
    cell_id: str
    seed: int
    method: str
    scenarios: int
    m1: int
    m2: int
    r: float
    sigma: float
    outer_iters: int
    inner_iters_total: int
    wall_ms: float
    stop_quantity: float
    residual: float
    status: str
    inner_per_iter: list[int] = field(default_factory=list, compare=False)

    def row(self) -> dict:
        d = asdict(self)
        d["cell-id"] = d.pop("cell_id")
        return {c: d[c] for c in CSV_COLUMNS}


@dataclass
class Aggregate:
    experiment: str
    cell_id: str
    method: str
    scenarios: int
    m1: int
    m2: int
    offset: float
    runs: int
    converged: int
    failures: int
    mean_outer_iters: float
    mean_inner_iters: float
    mean_wall_ms: float


def instance_seed(master_seed: int, scenarios: int, m1: int, m2: int, rep: int) -> int:
    ss = np.random.SeedSequence(master_seed, spawn_key=(scenarios, m1, m2, rep))
    return int(ss.generate_state(1, np.uint64)[0])


def arm_r(method: str, offset: float, inst: SviInstance) -> float:
    if method == FPA:
        return float(inst.lipschitz_moduli.max()) + FPA_MARGIN + offset
    return offset


def run_one(config: ExperimentConfig, cell: Cell, rep: int) -> RunRecord:
    seed = instance_seed(config.master_seed, cell.scenarios, cell.m1, cell.m2, rep)
    _, inst, _ = sample_monotone_instance(seed, cell.scenarios, cell.m1, cell.m2, config.ranges)
    r = arm_r(cell.method, cell.offset, inst)
    params = IphaParams(r=r, sigma=config.sigma, tau=config.tau, stop_tol=config.stop_tol,
                        max_outer_iters=config.max_outer_iters)
    sub = SubsolverConfig(method=cell.method, inner_tol=config.inner_tol,
                          max_inner_iters=config.max_inner_iters)
    t0 = time.perf_counter()
    res = solve(inst, params, sub)
    wall = (time.perf_counter() - t0) * 1e3
    return RunRecord(
        experiment=config.name, cell_id=cell.cell_id, seed=seed, method=cell.method,
        scenarios=cell.scenarios, m1=cell.m1, m2=cell.m2, r=r, sigma=config.sigma,
        outer_iters=res.iterations, inner_iters_total=res.inner_iters_total, wall_ms=wall,
        stop_quantity=res.stop_quantity, residual=res.residual, status=res.status,
        inner_per_iter=[h["inner_iters"] for h in res.history],
    )


def _run_task(args):
    return run_one(*args)


def run_experiment(config: ExperimentConfig, jobs: int = 1,
                   progress=None) -> tuple[list[RunRecord], list[Aggregate]]:
    """Run every (cell, repetition) and aggregate per cell.

    Records come back ordered by cell, then repetition, whatever ``jobs`` is.
    """
    cells = config.cells()
    tasks = [(config, c, rep) for c in cells for rep in range(config.repetitions)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_run_task, tasks))
    else:
        records = []
        for t in tasks:
            records.append(_run_task(t))
            if progress:
                progress(records[-1])
    return records, aggregate(config, cells, records)


def aggregate(config: ExperimentConfig, cells, records) -> list[Aggregate]:
    """Means over converged runs; other statuses only count as failures."""
    by_cell: dict[str, list[RunRecord]] = {}
    for rec in records:
        by_cell.setdefault(rec.cell_id, []).append(rec)
    out = []
    for c in cells:
        recs = by_cell.get(c.cell_id, [])
        ok = [r for r in recs if r.status == CONVERGED]

        def mean(attr):
            return float(np.mean([getattr(r, attr) for r in ok])) if ok else math.nan

        out.append(Aggregate(
            config.name, c.cell_id, c.method, c.scenarios, c.m1, c.m2, c.offset,
            runs=len(recs), converged=len(ok), failures=len(recs) - len(ok),
            mean_outer_iters=mean("outer_iters"), mean_inner_iters=mean("inner_iters_total"),
            mean_wall_ms=mean("wall_ms"),
        ))
    return out


# -- CSV ---------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_rows(path, columns, rows) -> None:
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(columns)
            for row in rows:
                wr.writerow([_fmt(row[c]) for c in columns])
    except OSError as e:
        raise IphaError(f"cannot write {path}: {e.strerror}") from e


def emit_csv(records, path) -> None:
    """Write run records, one row each, in the fixed column order."""
    if not records:
        raise ParameterError("no records to write")
    _write_rows(path, CSV_COLUMNS, [r.row() for r in records])


def emit_aggregate_csv(aggregates, path) -> None:
    if not aggregates:
        raise ParameterError("no aggregates to write")
    rows = []
    for a in aggregates:
        d = asdict(a)
        d["cell-id"] = d.pop("cell_id")
        rows.append(d)
    _write_rows(path, AGGREGATE_COLUMNS, rows)


def parse_csv(path) -> list[RunRecord]:
    """Read back a file written by :func:`emit_csv`."""
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as e:
        raise SchemaError(f"cannot read {path}: {e.strerror}") from e
    with fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header is None or tuple(header) != CSV_COLUMNS:
            raise SchemaError(f"{path}:1: header does not match the run-record columns")
        out = []
        for lineno, row in enumerate(rd, start=2):
            if len(row) != len(CSV_COLUMNS):
                raise SchemaError(f"{path}:{lineno}: expected {len(CSV_COLUMNS)} fields, got {len(row)}")
            d = {}
            for col, v in zip(CSV_COLUMNS, row):
                try:
                    d[col] = int(v) if col in _INT_COLUMNS else float(v) if col in _FLOAT_COLUMNS else v
                except ValueError:
                    raise SchemaError(f"{path}:{lineno}: field {col!r} has bad value {v!r}") from None
            d["cell_id"] = d.pop("cell-id")
            out.append(RunRecord(**d))
    return out


# -- verification ------------------------------------------------------------


@dataclass
class VerifyReport:
    n_membership: float
    m_membership: float
    natural: float
    tolerance: float
    feasibility: float = 0.0  # dist(P_N x, C); reported, not part of the verdict

    @property
    def residual(self) -> float:
        return max(self.n_membership, self.m_membership, self.natural)

    @property
    def passed(self) -> bool:
        return self.residual <= self.tolerance

    def lines(self) -> list[str]:
        return [
            f"N-membership error : {self.n_membership:.3e}",
            f"M-membership error : {self.m_membership:.3e}",
            f"natural residual   : {self.natural:.3e}",
            f"dist(P_N x, C)     : {self.feasibility:.3e}",
            f"{'PASS' if self.passed else 'FAIL'} at tolerance {self.tolerance:g}",
        ]


def verify_solution(inst: SviInstance, x, w, tol: float = 1e-6) -> VerifyReport:
    """Check ``(x, w)`` against the extensive-form conditions."""
    rep = residual_terms(inst, x, w)
    xn = project_N(inst.space.check(x, "x"), inst.space)
    feas = norm(xn - inst.constraints.project(xn), inst.space)
    return VerifyReport(rep.n_membership, rep.m_membership, rep.natural, tol, feas)
