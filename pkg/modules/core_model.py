import bisect
import math
import re
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import tomli_w
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from utils.logger_config import setup_logger, get_run_logger, default_log_file

logger = setup_logger(name=__name__, log_file=default_log_file())

NODE_TOLERANCE = 1e-9
JUMP_WARNING_FRACTION = 0.1


class ModelParseError(ValueError):
    def __init__(self, message, line=None, field=None):
        location = []
        if line is not None:
            location.append(f"line {line}")
        if field:
            location.append(f"field '{field}'")
        prefix = f"[{', '.join(location)}] " if location else ""
        super().__init__(f"{prefix}{message}")
        self.line = line
        self.field = field


class ModelValidationError(ValueError):
    def __init__(self, report):
        self.report = list(report)
        super().__init__("; ".join(self.report))


class GridError(ValueError):
    pass


class ControlError(ValueError):
    pass


class Bounds(BaseModel):
    model_config = ConfigDict(frozen=True)

    eps_spd: float = Field(default=1e-10, gt=0)
    A_bound: float = Field(default=10.0, gt=0)
    B_bound: float = Field(default=10.0, gt=0)
    C_bound: float = Field(default=10.0, ge=0)


class TimeGrid(BaseModel):
    model_config = ConfigDict(frozen=True)

    r: float = 0.0
    T: float
    N: int

    @field_validator("N")
    @classmethod
    def _check_steps(cls, value):
        if value < 1:
            raise ValueError("N must be ≥ 1")
        return value

    @model_validator(mode="after")
    def _check_horizon(self):
        if not (math.isfinite(self.r) and math.isfinite(self.T)):
            raise ValueError("r and T must be finite")
        if self.r < 0 or self.r >= self.T:
            raise ValueError(f"need 0 ≤ r < T, got r={self.r}, T={self.T}")
        return self

    @property
    def dt(self) -> float:
        return (self.T - self.r) / self.N

    def time_at(self, level: int) -> float:
        return self.r + level * self.dt

    def times(self) -> np.ndarray:
        return np.array([self.time_at(k) for k in range(self.N + 1)])

    def node_index(self, t: float) -> int:
        position = (t - self.r) / self.dt
        level = int(round(position))
        if abs(position - level) > NODE_TOLERANCE or not 0 <= level <= self.N:
            raise GridError(f"t={t} is not a node of the time grid [{self.r}, {self.T}] with N={self.N}")
        return level


class SpaceGrid(BaseModel):
    model_config = ConfigDict(frozen=True)

    n: int = 1
    lower: List[float]
    upper: List[float]
    M: List[int]

    @field_validator("n")
    @classmethod
    def _check_dimension(cls, value):
        if value not in (1, 2):
            raise ValueError("grid solves support n = 1 or n = 2")
        return value

    @model_validator(mode="after")
    def _check_axes(self):
        if not (len(self.lower) == len(self.upper) == len(self.M) == self.n):
            raise ValueError(f"lower, upper and M must each have n={self.n} entries")
        for axis, (lo, hi, count) in enumerate(zip(self.lower, self.upper, self.M)):
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise ValueError(f"axis {axis}: bounds must be finite")
            if lo >= hi:
                raise ValueError(f"axis {axis}: lower must be < upper")
            if count < 3:
                raise ValueError(f"axis {axis}: M must be ≥ 3")
        return self

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.M)

    @property
    def dx(self) -> np.ndarray:
        return np.array([(hi - lo) / (count - 1) for lo, hi, count in zip(self.lower, self.upper, self.M)])

    @property
    def size(self) -> int:
        return int(np.prod(self.M))

    def axes(self) -> List[np.ndarray]:
        return [lo + h * np.arange(count) for lo, h, count in zip(self.lower, self.dx, self.M)]

    def points(self) -> np.ndarray:
        """Cell coordinates, shape grid.shape + (n,)."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack(mesh, axis=-1)

    def nearest_cell(self, x: np.ndarray) -> Tuple[np.ndarray, ...]:
        """Clamped nearest-cell indices for states of shape (..., n)."""
        x = np.asarray(x, dtype=float)
        index = []
        for axis, (lo, h, count) in enumerate(zip(self.lower, self.dx, self.M)):
            idx = np.rint((x[..., axis] - lo) / h).astype(np.int64)
            index.append(np.clip(idx, 0, count - 1))
        return tuple(index)

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        inside = np.ones(x.shape[:-1], dtype=bool)
        for axis, (lo, hi) in enumerate(zip(self.lower, self.upper)):
            inside &= (x[..., axis] >= lo) & (x[..., axis] <= hi)
        return inside


class JumpAtom(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    y: List[float]
    lam: float = Field(alias="lambda")

    @model_validator(mode="after")
    def _check_atom(self):
        if not all(math.isfinite(v) for v in self.y) or float(np.linalg.norm(self.y)) <= 0:
            raise ValueError("jump vector must be finite and nonzero")
        if not math.isfinite(self.lam) or self.lam < 0:
            raise ValueError("jump intensity must be ≥ 0")
        return self

    @property
    def vector(self) -> np.ndarray:
        return np.asarray(self.y, dtype=float)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.y))


class ParamPoint(BaseModel):
    """One generator triple (a, b, jumps)."""

    model_config = ConfigDict(frozen=True)

    a: List[List[float]]
    b: List[float]
    jumps: List[JumpAtom] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_shapes(self):
        n = len(self.b)
        if n == 0:
            raise ValueError("drift b must not be empty")
        if len(self.a) != n or any(len(row) != n for row in self.a):
            raise ValueError(f"a must be a {n}x{n} matrix to match b")
        for atom in self.jumps:
            if len(atom.y) != n:
                raise ValueError(f"jump vector {atom.y} must have dimension {n}")
        return self

    @property
    def dim(self) -> int:
        return len(self.b)

    @property
    def a_matrix(self) -> np.ndarray:
        return np.asarray(self.a, dtype=float)

    @property
    def b_vec(self) -> np.ndarray:
        return np.asarray(self.b, dtype=float)

    @property
    def total_intensity(self) -> float:
        return float(sum(atom.lam for atom in self.jumps))

    def effective_drift(self) -> np.ndarray:
        # jumps enter as pure shifts once the compensator is moved into the drift
        drift = self.b_vec.copy()
        for atom in self.jumps:
            drift -= atom.lam * atom.vector / (1.0 + atom.norm ** 2)
        return drift

    @classmethod
    def diffusion(cls, a, b=None, jumps=None):
        a = np.atleast_2d(np.asarray(a, dtype=float))
        b = np.zeros(a.shape[0]) if b is None else np.atleast_1d(np.asarray(b, dtype=float))
        atoms = [atom if isinstance(atom, JumpAtom) else JumpAtom(y=list(np.atleast_1d(atom[0])), lam=atom[1])
                 for atom in (jumps or [])]
        return cls(a=a.tolist(), b=b.tolist(), jumps=atoms)


def levy_moment(jumps: Sequence[JumpAtom]) -> float:
    total = 0.0
    for atom in jumps:
        norm = atom.norm
        total += atom.lam * (norm ** 2 if norm <= 1.0 else norm)
    return total


def validate_param(theta: ParamPoint, bounds: Optional[Bounds] = None) -> List[str]:
    """List every violated admissibility condition; empty means usable everywhere."""
    bounds = bounds or Bounds()
    report = []

    a = theta.a_matrix
    if not np.all(np.isfinite(a)) or not np.all(np.isfinite(theta.b_vec)):
        return ["a and b must be finite"]

    if not np.allclose(a, a.T, rtol=0.0, atol=1e-12):
        report.append("a not symmetric")
    smallest = float(np.min(np.linalg.eigvalsh(0.5 * (a + a.T))))
    if smallest < bounds.eps_spd:
        report.append(f"a not strictly positive definite (smallest eigenvalue {smallest:g} < {bounds.eps_spd:g})")

    a_norm = float(np.linalg.norm(a, 2))
    if a_norm > bounds.A_bound:
        report.append(f"|a| {a_norm:g} > {bounds.A_bound:g}")
    b_norm = float(np.linalg.norm(theta.b_vec))
    if b_norm > bounds.B_bound:
        report.append(f"|b| {b_norm:g} > {bounds.B_bound:g}")

    moment = levy_moment(theta.jumps)
    if moment > bounds.C_bound:
        report.append(f"levy moment {moment:g} > {bounds.C_bound:g}")

    return report


class GammaMap(BaseModel):
    """Finite candidate sets of ParamPoints, selected by time or by the x1 coordinate of a cell."""

    model_config = ConfigDict(frozen=True)

    mode: Literal["constant", "time-dependent", "state-dependent"] = "constant"
    breaks: List[float] = Field(default_factory=list)
    sets: List[List[ParamPoint]]

    @model_validator(mode="after")
    def _check_sets(self):
        if not self.sets or any(len(candidates) == 0 for candidates in self.sets):
            raise ValueError("every candidate set must be nonempty")
        if self.mode == "constant":
            if len(self.sets) != 1 or self.breaks:
                raise ValueError("constant mode takes exactly one candidate set and no breaks")
        elif len(self.sets) != len(self.breaks) + 1:
            raise ValueError(f"{self.mode} mode needs len(breaks)+1 = {len(self.breaks) + 1} sets, got {len(self.sets)}")
        if any(b2 <= b1 for b1, b2 in zip(self.breaks, self.breaks[1:])):
            raise ValueError("breaks must be strictly increasing")
        dims = {theta.dim for candidates in self.sets for theta in candidates}
        if len(dims) != 1:
            raise ValueError("all candidates must share one state dimension")
        return self

    @property
    def dim(self) -> int:
        return self.sets[0][0].dim

    @property
    def max_candidates(self) -> int:
        return max(len(candidates) for candidates in self.sets)

    def all_candidates(self) -> List[ParamPoint]:
        return [theta for candidates in self.sets for theta in candidates]

    def set_index_field(self, t: float, grid: SpaceGrid) -> np.ndarray:
        if self.mode == "constant":
            return np.zeros(grid.shape, dtype=np.int64)
        if self.mode == "time-dependent":
            index = bisect.bisect_right(self.breaks, t + NODE_TOLERANCE)
            return np.full(grid.shape, index, dtype=np.int64)
        x1 = grid.points()[..., 0]
        return np.searchsorted(np.asarray(self.breaks), x1, side="right").astype(np.int64)

    def candidates_at(self, t: float, x: Sequence[float]) -> List[ParamPoint]:
        if self.mode == "constant":
            return self.sets[0]
        if self.mode == "time-dependent":
            return self.sets[bisect.bisect_right(self.breaks, t + NODE_TOLERANCE)]
        return self.sets[bisect.bisect_right(self.breaks, float(x[0]))]


class Penalty(BaseModel):
    """Running cost g(t, x, theta)."""

    model_config = ConfigDict(frozen=True)

    family: Literal["zero", "constant", "quadratic_drift", "state_quadratic", "table"] = "zero"
    c: float = 0.0
    eta: float = 0.0
    kappa: float = 0.0
    values: List[List[float]] = Field(default_factory=list)

    def _table(self) -> np.ndarray:
        width = max(len(row) for row in self.values)
        table = np.zeros((len(self.values), width))
        for i, row in enumerate(self.values):
            table[i, :len(row)] = row
        return table

    def evaluate(self, t, x, b, set_idx=0, cand_idx=0) -> np.ndarray:
        """Vectorized g; x has shape (..., n), b broadcasts against it."""
        x = np.asarray(x, dtype=float)
        shape = x.shape[:-1]
        if self.family == "zero":
            return np.zeros(shape)
        if self.family == "constant":
            return np.full(shape, self.c)
        if self.family == "quadratic_drift":
            b = np.asarray(b, dtype=float)
            return np.broadcast_to(0.5 * self.eta * np.sum(b * b, axis=-1), shape).copy()
        if self.family == "state_quadratic":
            return self.kappa * np.sum(x * x, axis=-1)
        table = self._table()
        return np.broadcast_to(table[np.asarray(set_idx), np.asarray(cand_idx)], shape).astype(float)

    def scalar(self, t, x, theta: ParamPoint, set_idx=0, cand_idx=0) -> float:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return float(self.evaluate(t, x[None, :], theta.b_vec, set_idx, cand_idx)[0])


class Payoff(BaseModel):
    """Terminal payoff h from one of the builtin families."""

    model_config = ConfigDict(frozen=True)

    family: Literal["quadratic", "absolute", "affine", "call", "smoothed_call", "indicator_smoothed", "tabulated"]
    coef: float = 1.0
    center: Optional[List[float]] = None
    offset: float = 0.0
    weights: Optional[List[float]] = None
    strike: float = 0.0
    width: float = Field(default=1.0, gt=0)
    level: float = 0.0
    x: List[float] = Field(default_factory=list)
    values: List[float] = Field(default_factory=list)
    sign: float = 1.0

    @model_validator(mode="after")
    def _check_table(self):
        if self.family == "tabulated":
            if len(self.x) < 2 or len(self.x) != len(self.values):
                raise ValueError("tabulated payoff needs matching x and values with at least 2 samples")
            if any(x2 <= x1 for x1, x2 in zip(self.x, self.x[1:])):
                raise ValueError("tabulated x samples must be strictly increasing")
        return self

    def _projection(self, x: np.ndarray) -> np.ndarray:
        n = x.shape[-1]
        weights = np.zeros(n)
        if self.weights is None:
            weights[0] = 1.0
        else:
            weights[:len(self.weights)] = self.weights
        return x @ weights

    def _center(self, n: int) -> np.ndarray:
        center = np.zeros(n)
        if self.center is not None:
            center[:len(self.center)] = self.center
        return center

    def evaluate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        n = x.shape[-1]
        if self.family == "quadratic":
            shifted = x - self._center(n)
            value = self.coef * np.sum(shifted * shifted, axis=-1) + self.offset
        elif self.family == "absolute":
            value = np.sum(np.abs(x - self._center(n)), axis=-1)
        elif self.family == "affine":
            value = self._projection(x) + self.offset
        elif self.family == "call":
            value = np.maximum(self._projection(x) - self.strike, 0.0)
        elif self.family == "smoothed_call":
            value = self.width * np.logaddexp(0.0, (self._projection(x) - self.strike) / self.width)
        elif self.family == "indicator_smoothed":
            value = 0.5 * (1.0 + np.tanh((self._projection(x) - self.level) / (2.0 * self.width)))
        else:
            value = np.interp(x[..., 0], self.x, self.values)
        return self.sign * value

    def __call__(self, x) -> np.ndarray:
        return self.evaluate(x)

    @property
    def convexity(self) -> Optional[str]:
        if self.family == "affine" or (self.family == "quadratic" and self.coef == 0):
            return "affine"
        if self.family == "quadratic":
            shape = "convex" if self.coef > 0 else "concave"
        elif self.family in ("absolute", "call", "smoothed_call"):
            shape = "convex"
        else:
            return None
        if self.sign < 0:
            return "concave" if shape == "convex" else "convex"
        return shape

    def negated(self) -> "Payoff":
        return self.model_copy(update={"sign": -self.sign})


class Model(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str = ""
    time: TimeGrid
    space: SpaceGrid
    bounds: Bounds = Field(default_factory=Bounds)
    gamma: GammaMap
    penalty: Penalty = Field(default_factory=Penalty)
    payoff: Payoff

    @model_validator(mode="after")
    def _check_consistency(self):
        if self.gamma.dim != self.space.n:
            raise ValueError(f"candidates have dimension {self.gamma.dim} but the space grid has n={self.space.n}")
        if self.penalty.family == "table":
            if len(self.penalty.values) != len(self.gamma.sets) or any(
                len(row) != len(candidates) for row, candidates in zip(self.penalty.values, self.gamma.sets)
            ):
                raise ValueError("penalty table must give one value per candidate of every set")
        if self.payoff.family == "tabulated" and self.space.n != 1:
            raise ValueError("tabulated payoff is only available for n = 1")
        return self

    def parts(self):
        return self.time, self.space, self.gamma, self.penalty, self.payoff

    def with_payoff(self, payoff: Payoff) -> "Model":
        return self.model_copy(update={"payoff": payoff})

    def with_time(self, **updates) -> "Model":
        return self.model_copy(update={"time": TimeGrid(**{**self.time.model_dump(), **updates})})

    def with_space(self, **updates) -> "Model":
        return self.model_copy(update={"space": SpaceGrid(**{**self.space.model_dump(), **updates})})

    def pinned(self, theta: ParamPoint) -> "Model":
        """Same grids, Γ reduced to the single candidate theta, no running cost."""
        return self.model_copy(update={
            "gamma": GammaMap(mode="constant", sets=[[theta]]),
            "penalty": Penalty(family="zero"),
        })


def check_penalty_bounded(model: Model, samples: int = 9) -> Tuple[float, List[str]]:
    """Sup of g over sampled time nodes, all cells and every candidate there."""
    grid = model.space
    points = grid.points()
    levels = np.unique(np.linspace(0, model.time.N, num=min(samples, model.time.N + 1)).round().astype(int))
    sup = -math.inf
    report = []
    for level in levels:
        t = model.time.time_at(int(level))
        set_field = model.gamma.set_index_field(t, grid)
        for set_idx in np.unique(set_field):
            mask = set_field == set_idx
            for cand_idx, theta in enumerate(model.gamma.sets[set_idx]):
                g = model.penalty.evaluate(t, points[mask], theta.b_vec, set_idx, cand_idx)
                if not np.all(np.isfinite(g)):
                    report.append(f"penalty not finite at t={t:g} for set {set_idx} candidate {cand_idx}")
                    continue
                sup = max(sup, float(np.max(g)))
    return sup, report


def validate_model(model: Model) -> List[str]:
    report = []
    for set_idx, candidates in enumerate(model.gamma.sets):
        for cand_idx, theta in enumerate(candidates):
            for message in validate_param(theta, model.bounds):
                report.append(f"gamma set {set_idx} candidate {cand_idx}: {message}")
    _, penalty_report = check_penalty_bounded(model)
    report.extend(penalty_report)
    return report


def _warn_long_jumps(model: Model, log, fraction: float = JUMP_WARNING_FRACTION):
    widths = np.asarray(model.space.upper) - np.asarray(model.space.lower)
    for set_idx, candidates in enumerate(model.gamma.sets):
        for cand_idx, theta in enumerate(candidates):
            for atom in theta.jumps:
                if atom.norm > fraction * float(np.min(widths)):
                    log.warning(
                        f"Jump {atom.y} of set {set_idx} candidate {cand_idx} exceeds {fraction:.0%} of the box width; "
                        f"shifts near the boundary will use the boundary extension"
                    )


def _candidate_from_table(entry: Dict) -> Tuple[int, ParamPoint]:
    set_idx = int(entry.get("set", 0))
    b = [float(v) for v in entry["b"]]
    n = len(b)
    a_flat = [float(v) for v in entry["a"]]
    if len(a_flat) != n * n:
        raise ValueError(f"a must hold {n * n} row-major entries, got {len(a_flat)}")
    a = [a_flat[i * n:(i + 1) * n] for i in range(n)]
    jumps = [JumpAtom(y=[float(v) for v in row[:-1]], lam=float(row[-1])) for row in entry.get("jumps", [])]
    return set_idx, ParamPoint(a=a, b=b, jumps=jumps)


def _build_model(data: Dict, name: str) -> Model:
    gamma_section = dict(data.get("gamma", {}))
    grouped: Dict[int, List[ParamPoint]] = {}
    for position, entry in enumerate(gamma_section.pop("candidates", [])):
        try:
            set_idx, theta = _candidate_from_table(entry)
        except KeyError as e:
            raise ModelParseError(f"missing key {e}", field=f"gamma.candidates[{position}]") from e
        except (ValueError, TypeError) as e:
            raise ModelParseError(str(e), field=f"gamma.candidates[{position}]") from e
        grouped.setdefault(set_idx, []).append(theta)
    if grouped and sorted(grouped) != list(range(len(grouped))):
        raise ModelParseError(f"candidate sets must be numbered 0..k without gaps, got {sorted(grouped)}",
                              field="gamma.candidates")
    gamma_section["sets"] = [grouped[i] for i in sorted(grouped)]

    return Model(
        name=name,
        time=data.get("time", {}),
        space=data.get("space", {}),
        bounds=data.get("bounds", {}),
        gamma=gamma_section,
        penalty=data.get("penalty", {"family": "zero"}),
        payoff=data.get("payoff", {}),
    )


def load_model(text: str, name: str = "", run_id: Optional[str] = None) -> Model:
    """Parse model-file text, build every object and check every invariant."""
    log = get_run_logger(logger, run_id)

    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        match = re.search(r"line (\d+)", str(e))
        raise ModelParseError(str(e), line=int(match.group(1)) if match else None) from e

    try:
        model = _build_model(data, name)
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(part) for part in first["loc"])
        cause = first.get("ctx", {}).get("error")
        if first["type"] == "value_error" and cause is not None:
            raise ModelValidationError([f"{location}: {cause}" if location else str(cause)]) from e
        raise ModelParseError(first["msg"], field=location or None) from e

    report = validate_model(model)
    if report:
        raise ModelValidationError(report)

    _warn_long_jumps(model, log)
    log.info(
        f"Loaded model '{name or 'unnamed'}': n={model.space.n}, grid {model.space.shape}, N={model.time.N}, "
        f"{len(model.gamma.sets)} candidate set(s), penalty '{model.penalty.family}', payoff '{model.payoff.family}'"
    )
    return model


def load_model_file(path: str, run_id: Optional[str] = None) -> Model:
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    return load_model(text, name=path, run_id=run_id)


def _drop_defaults(section: Dict, defaults: Dict) -> Dict:
    return {key: value for key, value in section.items() if value is not None and defaults.get(key) != value}


def serialize_model(model: Model) -> str:
    candidates = []
    for set_idx, thetas in enumerate(model.gamma.sets):
        for theta in thetas:
            entry = {"set": set_idx, "a": [v for row in theta.a for v in row], "b": list(theta.b)}
            if theta.jumps:
                entry["jumps"] = [list(atom.y) + [atom.lam] for atom in theta.jumps]
            candidates.append(entry)

    gamma = {"mode": model.gamma.mode, "candidates": candidates}
    if model.gamma.breaks:
        gamma["breaks"] = list(model.gamma.breaks)

    payoff_defaults = Payoff(family=model.payoff.family).model_dump() if model.payoff.family != "tabulated" else {}
    penalty_defaults = Penalty().model_dump()

    document = {
        "time": model.time.model_dump(),
        "space": model.space.model_dump(),
        "bounds": model.bounds.model_dump(),
        "gamma": gamma,
        "penalty": {"family": model.penalty.family,
                    **_drop_defaults(model.penalty.model_dump(exclude={"family"}), penalty_defaults)},
        "payoff": {"family": model.payoff.family,
                   **_drop_defaults(model.payoff.model_dump(exclude={"family"}), payoff_defaults)},
    }
    return tomli_w.dumps(document)


@dataclass(frozen=True, eq=False)
class Bifurcation:
    level: int
    region: np.ndarray
    on_region: "Control"
    off_region: "Control"


@dataclass(frozen=True, eq=False)
class Control:
    """Piecewise-constant feedback policy.

    ``subdivision`` holds time-grid levels s_0 = 0 < ... < s_m; interval i uses
    ``selectors[i]``, an integer array over the space grid giving the candidate
    index inside the Γ set of each cell. When ``bifurcation`` is set the control
    ends at its level and continues with one of two branch controls, chosen by
    the cell occupied at that level.
    """

    subdivision: Tuple[int, ...]
    selectors: Tuple[np.ndarray, ...]
    bifurcation: Optional[Bifurcation] = None
    labels: Dict[str, str] = field(default_factory=dict, compare=False)

    @property
    def end_level(self) -> int:
        return self.subdivision[-1]

    def interval_of(self, level: int) -> int:
        if not self.subdivision[0] <= level < self.subdivision[-1]:
            raise ControlError(f"level {level} outside the control's own range {self.subdivision[0]}..{self.end_level}")
        return bisect.bisect_right(self.subdivision, level) - 1

    def selector_at(self, level: int) -> np.ndarray:
        return self.selectors[self.interval_of(level)]

    @classmethod
    def constant(cls, model: Model, index: int = 0) -> "Control":
        selector = np.full(model.space.shape, index, dtype=np.int64)
        return cls(subdivision=(0, model.time.N), selectors=(selector,))

    @classmethod
    def from_policies(cls, policies: Sequence[np.ndarray]) -> "Control":
        return cls(
            subdivision=tuple(range(len(policies) + 1)),
            selectors=tuple(np.asarray(p, dtype=np.int64).copy() for p in policies),
        )

    def validate(self, model: Model):
        N = model.time.N
        levels = self.subdivision
        if levels[0] != 0 or any(b <= a for a, b in zip(levels, levels[1:])):
            raise ControlError(f"subdivision must start at level 0 and increase strictly, got {levels}")
        if self.bifurcation is None and levels[-1] != N:
            raise ControlError(f"subdivision must end at level N={N}, got {levels[-1]}")
        if len(self.selectors) != len(levels) - 1:
            raise ControlError("need exactly one selector per subdivision interval")
        for i, selector in enumerate(self.selectors):
            if selector.shape != model.space.shape:
                raise ControlError(f"selector {i} has shape {selector.shape}, grid is {model.space.shape}")
            for level in range(levels[i], levels[i + 1]):
                set_field = model.gamma.set_index_field(model.time.time_at(level), model.space)
                sizes = np.array([len(s) for s in model.gamma.sets])[set_field]
                bad = (selector < 0) | (selector >= sizes)
                if np.any(bad):
                    cell = tuple(int(v) for v in np.argwhere(bad)[0])
                    raise ControlError(f"selector out of range at level {level}, cell {cell}")
        if self.bifurcation is not None:
            bif = self.bifurcation
            if bif.level != levels[-1]:
                raise ControlError("bifurcation level must close the subdivision")
            if bif.region.shape != model.space.shape:
                raise ControlError("bifurcation region must cover the space grid")
            bif.on_region.validate(model)
            bif.off_region.validate(model)


def save_control(control: Control, path: str):
    if control.bifurcation is not None:
        raise ControlError("bifurcated controls cannot be written as a flat control file")
    np.savez(path, subdivision=np.asarray(control.subdivision, dtype=np.int64),
             selectors=np.stack(control.selectors))


def load_control(path: str) -> Control:
    with np.load(path) as data:
        subdivision = tuple(int(v) for v in data["subdivision"])
        selectors = tuple(np.asarray(s, dtype=np.int64) for s in data["selectors"])
    return Control(subdivision=subdivision, selectors=selectors)
