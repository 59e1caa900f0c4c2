import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from modules.core_model import Control, ControlError, Model, ParamPoint, Payoff
from modules.oracles import g_heat_reference, gaussian_semigroup
from utils.logger_config import setup_logger, get_run_logger, default_log_file

logger = setup_logger(name=__name__, log_file=default_log_file())

FRACTION_SNAP = 1e-9


class SchemeConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    boundary: Literal["linear-extrapolation", "clamp-to-payoff"] = "linear-extrapolation"
    cfl_factor: float = Field(default=1.0, gt=0, le=1)
    band_sigmas: float = Field(default=5.0, ge=0)
    threads: int = Field(default=1, ge=1)


class CFLViolationError(ValueError):
    def __init__(self, cfl_number, max_dt, dt, detail=""):
        message = (f"CFL condition violated: dt={dt:.6g} gives CFL number {cfl_number:.6g}; "
                   f"maximal admissible dt is {max_dt:.6g}")
        if detail:
            message = f"{detail}; {message}"
        super().__init__(message)
        self.cfl_number = cfl_number
        self.max_dt = max_dt


class MonotonicityError(ValueError):
    pass


class SchemeError(ValueError):
    def __init__(self, message, cell=None):
        super().__init__(message if cell is None else f"{message} at cell {cell}")
        self.cell = cell


@dataclass(eq=False)
class ValueField:
    t: float
    level: int
    values: np.ndarray
    policy: np.ndarray


@dataclass(eq=False)
class SolveResult:
    history: List[ValueField]
    control: Optional[Control] = None
    diagnostics: Dict = field(default_factory=dict)
    branches: Dict[str, "SolveResult"] = field(default_factory=dict)

    @property
    def level0(self) -> ValueField:
        return self.history[0]

    def values(self, level: int) -> np.ndarray:
        return self.history[level].values


class ConvergenceRow(BaseModel):
    level: int
    dx: float
    dt: float
    sup_error: float
    observed_order: Optional[float] = None


@dataclass(frozen=True)
class _CompiledCandidate:
    half_diag: np.ndarray
    cross: float
    drift_pos: np.ndarray
    drift_neg: np.ndarray
    jumps: Tuple[Tuple[float, Tuple[int, ...], Tuple[float, ...]], ...]
    reach: int


def _jump_offsets(y: np.ndarray, dx: np.ndarray):
    offsets, fractions = [], []
    for component, h in zip(y, dx):
        position = component / h
        base = math.floor(position)
        frac = position - base
        if frac < FRACTION_SNAP:
            frac = 0.0
        elif frac > 1.0 - FRACTION_SNAP:
            base, frac = base + 1, 0.0
        offsets.append(int(base))
        fractions.append(float(frac))
    return tuple(offsets), tuple(fractions)


def _compile(theta: ParamPoint, dx: np.ndarray) -> _CompiledCandidate:
    a = theta.a_matrix
    drift = theta.effective_drift()
    jumps = []
    reach = 1
    for atom in theta.jumps:
        offsets, fractions = _jump_offsets(atom.vector, dx)
        reach = max(reach, max(max(abs(q), q + 1) for q in offsets))
        jumps.append((atom.lam, offsets, fractions))
    return _CompiledCandidate(
        half_diag=0.5 * np.diag(a).copy(),
        cross=float(a[0, 1]) if a.shape[0] == 2 else 0.0,
        drift_pos=np.maximum(drift, 0.0),
        drift_neg=np.maximum(-drift, 0.0),
        jumps=tuple(jumps),
        reach=reach,
    )


def _rate(model: Model) -> float:
    dx = model.space.dx
    candidates = model.gamma.all_candidates()
    diffusion = np.max([np.diag(theta.a_matrix) for theta in candidates], axis=0)
    drift = np.max([np.abs(theta.effective_drift()) for theta in candidates], axis=0)
    intensity = max(theta.total_intensity for theta in candidates)
    return float(np.sum(diffusion / dx ** 2) + np.sum(drift / dx) + intensity)


def cfl_number(model: Model) -> float:
    return model.time.dt * _rate(model)


def max_admissible_dt(model: Model, scheme: Optional[SchemeConfig] = None) -> float:
    scheme = scheme or SchemeConfig()
    rate = _rate(model)
    return math.inf if rate == 0 else scheme.cfl_factor / rate


def check_scheme(model: Model, scheme: SchemeConfig):
    """Refuse grids on which the explicit scheme is not monotone."""
    number = cfl_number(model)
    if number > scheme.cfl_factor * (1.0 + 1e-12):
        raise CFLViolationError(number, max_admissible_dt(model, scheme), model.time.dt)

    if model.space.n == 2:
        h, k = model.space.dx
        for theta in model.gamma.all_candidates():
            a = theta.a_matrix
            mixed = abs(a[0, 1]) / (h * k)
            if a[0, 0] / h ** 2 < mixed or a[1, 1] / k ** 2 < mixed:
                raise MonotonicityError(
                    f"cross diffusion a12={a[0, 1]:g} is not dominated by the diagonal on this grid "
                    f"(dx={h:g}, dy={k:g}); refine the grid or reduce |a12|"
                )


def boundary_band(model: Model, scheme: SchemeConfig, elapsed: float) -> np.ndarray:
    """Per-axis distance from the box faces within which boundary data may matter."""
    dx = model.space.dx
    n = model.space.n
    candidates = model.gamma.all_candidates()
    diffusion = np.max([np.diag(theta.a_matrix) for theta in candidates], axis=0)
    drift = np.max([np.abs(theta.effective_drift()) for theta in candidates], axis=0)
    jump_reach = np.zeros(n)
    jump_rate = np.zeros(n)
    for theta in candidates:
        rate = np.zeros(n)
        for atom in theta.jumps:
            jump_reach = np.maximum(jump_reach, np.abs(atom.vector))
            rate += atom.lam * np.abs(atom.vector)
        jump_rate = np.maximum(jump_rate, rate)
    return dx + jump_reach + (drift + jump_rate) * elapsed + scheme.band_sigmas * np.sqrt(diffusion * elapsed)


def interior_mask(model: Model, scheme: Optional[SchemeConfig] = None, elapsed: Optional[float] = None) -> np.ndarray:
    scheme = scheme or SchemeConfig()
    elapsed = model.time.T - model.time.r if elapsed is None else elapsed
    band = boundary_band(model, scheme, elapsed)
    points = model.space.points()
    mask = np.ones(model.space.shape, dtype=bool)
    for axis, (lo, hi) in enumerate(zip(model.space.lower, model.space.upper)):
        coord = points[..., axis]
        mask &= (coord - lo > band[axis]) & (hi - coord > band[axis])
    return mask


def _extend_linear(w: np.ndarray, pad: int) -> np.ndarray:
    out = w
    for axis in range(w.ndim):
        moved = np.moveaxis(out, axis, 0)
        shape = (pad,) + (1,) * (moved.ndim - 1)
        below = np.arange(pad, 0, -1, dtype=float).reshape(shape)
        above = np.arange(1, pad + 1, dtype=float).reshape(shape)
        low = moved[0] - below * (moved[1] - moved[0])
        high = moved[-1] + above * (moved[-1] - moved[-2])
        out = np.moveaxis(np.concatenate([low, moved, high], axis=0), 0, axis)
    return out


class BackwardStepper:
    """One explicit monotone step of the controlled scheme, for every candidate at once."""

    def __init__(self, model: Model, scheme: Optional[SchemeConfig] = None, run_id: Optional[str] = None):
        self.model = model
        self.scheme = scheme or SchemeConfig()
        self.log = get_run_logger(logger, run_id)

        check_scheme(model, self.scheme)

        grid = model.space
        self.shape = grid.shape
        self.dx = grid.dx
        self.dt = model.time.dt
        self.points = grid.points()
        self.compiled = [[_compile(theta, self.dx) for theta in candidates] for candidates in model.gamma.sets]
        self.pad = 1 + max(c.reach for candidates in self.compiled for c in candidates)
        self.width = model.gamma.max_candidates
        self._core = tuple(slice(self.pad, self.pad + m) for m in self.shape)
        self._payoff_extension = None
        if self.scheme.boundary == "clamp-to-payoff":
            axes = [lo + h * np.arange(-self.pad, m + self.pad) for lo, h, m in zip(grid.lower, self.dx, self.shape)]
            mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
            self._payoff_extension = model.payoff.evaluate(mesh)

    def extend(self, w: np.ndarray) -> np.ndarray:
        if self._payoff_extension is None:
            return _extend_linear(w, self.pad)
        ext = self._payoff_extension.copy()
        ext[self._core] = w
        return ext

    def _view(self, ext: np.ndarray, shift: Sequence[int]) -> np.ndarray:
        return ext[tuple(slice(self.pad + s, self.pad + s + m) for s, m in zip(shift, self.shape))]

    def apply_candidate(self, cand: _CompiledCandidate, w: np.ndarray, ext: np.ndarray) -> np.ndarray:
        """w + dt·(L + K)w for one candidate, before the running cost."""
        n = w.ndim
        acc = np.zeros_like(w)
        for axis in range(n):
            unit = [0] * n
            unit[axis] = 1
            plus = self._view(ext, unit)
            unit[axis] = -1
            minus = self._view(ext, unit)
            h = self.dx[axis]
            acc += cand.half_diag[axis] * (plus - 2.0 * w + minus) / h ** 2
            acc += cand.drift_pos[axis] * (plus - w) / h - cand.drift_neg[axis] * (w - minus) / h

        if n == 2 and cand.cross != 0.0:
            weight = abs(cand.cross) / (2.0 * self.dx[0] * self.dx[1])
            if cand.cross > 0:
                diagonal = self._view(ext, (1, 1)) + self._view(ext, (-1, -1))
            else:
                diagonal = self._view(ext, (1, -1)) + self._view(ext, (-1, 1))
            axial = (self._view(ext, (1, 0)) + self._view(ext, (-1, 0))
                     + self._view(ext, (0, 1)) + self._view(ext, (0, -1)))
            acc += weight * (diagonal - axial + 2.0 * w)

        for lam, offsets, fractions in cand.jumps:
            shifted = np.zeros_like(w)
            for corner in product((0, 1), repeat=n):
                weight = 1.0
                for bit, frac in zip(corner, fractions):
                    weight *= frac if bit else 1.0 - frac
                if weight == 0.0:
                    continue
                shifted += weight * self._view(ext, [q + bit for q, bit in zip(offsets, corner)])
            acc += lam * (shifted - w)

        return w + self.dt * acc

    def candidate_values(self, w: np.ndarray, level: int) -> np.ndarray:
        """Array (K_max, *grid) of per-candidate updates; -inf where a candidate is not in Γ(t, x)."""
        t = self.model.time.time_at(level)
        ext = self.extend(w)
        set_field = self.model.gamma.set_index_field(t, self.model.space)
        tasks = []
        for set_idx in np.unique(set_field):
            mask = set_field == set_idx
            for cand_idx, cand in enumerate(self.compiled[set_idx]):
                tasks.append((int(set_idx), cand_idx, cand, mask))

        def run(task):
            set_idx, cand_idx, cand, mask = task
            theta = self.model.gamma.sets[set_idx][cand_idx]
            g = self.model.penalty.evaluate(t, self.points, theta.b_vec, set_field, cand_idx)
            return self.apply_candidate(cand, w, ext) - self.dt * g

        if self.scheme.threads > 1 and len(tasks) > 1:
            with ThreadPoolExecutor(max_workers=self.scheme.threads) as pool:
                results = list(pool.map(run, tasks))
        else:
            results = [run(task) for task in tasks]

        values = np.full((self.width,) + self.shape, -np.inf)
        for (set_idx, cand_idx, _, mask), result in zip(tasks, results):
            values[cand_idx][mask] = result[mask]
        return values

    def _check_finite(self, values: np.ndarray, level: int):
        bad = ~np.isfinite(values)
        if np.any(bad):
            cell = tuple(int(v) for v in np.argwhere(bad)[0])
            raise SchemeError(f"non-finite value produced at level {level}", cell=cell)

    def step(self, w: np.ndarray, level: int) -> Tuple[np.ndarray, np.ndarray]:
        candidates = self.candidate_values(w, level)
        policy = np.argmax(candidates, axis=0)
        values = np.take_along_axis(candidates, policy[None], axis=0)[0]
        self._check_finite(values, level)
        return values, policy.astype(np.int64)

    def step_selected(self, w: np.ndarray, level: int, selector: np.ndarray) -> np.ndarray:
        candidates = self.candidate_values(w, level)
        if np.any(selector >= self.width) or np.any(selector < 0):
            raise ControlError(f"selector out of range at level {level}")
        values = np.take_along_axis(candidates, selector[None], axis=0)[0]
        if np.any(np.isneginf(values)):
            cell = tuple(int(v) for v in np.argwhere(np.isneginf(values))[0])
            raise ControlError(f"selector picks a candidate outside Γ at level {level}, cell {cell}")
        self._check_finite(values, level)
        return values

    def sweep(self, terminal: np.ndarray, start_level: int, end_level: int) -> List[ValueField]:
        """Backward sweep from ``end_level`` (holding ``terminal``) down to ``start_level``."""
        time_grid = self.model.time
        fields = [ValueField(time_grid.time_at(end_level), end_level, terminal,
                             np.full(self.shape, -1, dtype=np.int64))]
        w = terminal
        for level in range(end_level - 1, start_level - 1, -1):
            w, policy = self.step(w, level)
            fields.append(ValueField(time_grid.time_at(level), level, w, policy))
        fields.reverse()
        return fields


def _diagnostics(model: Model, scheme: SchemeConfig, history: List[ValueField], started: float) -> Dict:
    return {
        "grid": list(model.space.shape),
        "N": model.time.N,
        "dt": model.time.dt,
        "cfl_number": cfl_number(model),
        "max_admissible_dt": max_admissible_dt(model, scheme),
        "max_abs": [float(np.max(np.abs(f.values))) for f in history],
        "boundary_band": [boundary_band(model, scheme, model.time.T - f.t).tolist() for f in history],
        "wall_time": time.perf_counter() - started,
    }


def dp_step(v_next: ValueField, t: float, model: Model, scheme: Optional[SchemeConfig] = None) -> ValueField:
    level = model.time.node_index(t)
    if level >= model.time.N:
        raise ValueError("dp_step needs t < T")
    stepper = BackwardStepper(model, scheme)
    values, policy = stepper.step(np.asarray(v_next.values, dtype=float), level)
    return ValueField(t, level, values, policy)


def solve(model: Model, scheme: Optional[SchemeConfig] = None, run_id: Optional[str] = None) -> SolveResult:
    log = get_run_logger(logger, run_id)
    scheme = scheme or SchemeConfig()
    started = time.perf_counter()

    stepper = BackwardStepper(model, scheme, run_id)
    terminal = model.payoff.evaluate(stepper.points)
    log.info(f"Solving on grid {model.space.shape} with N={model.time.N}, CFL number {cfl_number(model):.4f}")

    history = stepper.sweep(terminal, 0, model.time.N)
    control = Control.from_policies([f.policy for f in history[:-1]])
    diagnostics = _diagnostics(model, scheme, history, started)

    log.info(f"Backward sweep finished in {diagnostics['wall_time']:.3f}s, "
             f"max |v| at level 0: {diagnostics['max_abs'][0]:.6g}")
    return SolveResult(history=history, control=control, diagnostics=diagnostics)


def _control_sweep(stepper: BackwardStepper, control: Control, terminal: np.ndarray) -> SolveResult:
    model = stepper.model
    N = model.time.N
    values: List[Optional[np.ndarray]] = [None] * (N + 1)
    policies: List[Optional[np.ndarray]] = [None] * (N + 1)
    branches = {}

    if control.bifurcation is not None:
        bif = control.bifurcation
        on = _control_sweep(stepper, bif.on_region, terminal)
        off = _control_sweep(stepper, bif.off_region, terminal)
        branches = {"on_region": on, "off_region": off}
        # after the bifurcation the value depends on the cell held at its level; levels
        # above it show the branch picked by the current cell
        for level in range(bif.level, N + 1):
            values[level] = np.where(bif.region, on.values(level), off.values(level))
            policies[level] = np.where(bif.region, on.history[level].policy, off.history[level].policy)
        top = bif.level
    else:
        values[N] = terminal
        policies[N] = np.full(stepper.shape, -1, dtype=np.int64)
        top = N

    w = values[top]
    for level in range(top - 1, -1, -1):
        selector = control.selector_at(level)
        w = stepper.step_selected(w, level, selector)
        values[level] = w
        policies[level] = selector

    history = [ValueField(model.time.time_at(k), k, values[k], policies[k]) for k in range(N + 1)]
    return SolveResult(history=history, control=control, branches=branches)


def evaluate_control_dp(gamma: Control, model: Model, scheme: Optional[SchemeConfig] = None,
                        run_id: Optional[str] = None) -> SolveResult:
    """Value of one feedback control: the same sweep with the max replaced by the control's choice."""
    log = get_run_logger(logger, run_id)
    scheme = scheme or SchemeConfig()
    started = time.perf_counter()

    gamma.validate(model)
    stepper = BackwardStepper(model, scheme, run_id)
    terminal = model.payoff.evaluate(stepper.points)
    result = _control_sweep(stepper, gamma, terminal)
    result.diagnostics = _diagnostics(model, scheme, result.history, started)

    log.info(f"Evaluated control with {len(gamma.subdivision) - 1} interval(s)"
             f"{' and a bifurcation' if gamma.bifurcation is not None else ''}")
    return result


def penalty_field(gamma: Control, model: Model, scheme: Optional[SchemeConfig] = None,
                  run_id: Optional[str] = None) -> SolveResult:
    """Expected integrated running cost under gamma, as a field over (level, cell)."""
    zero = Payoff(family="affine", weights=[0.0] * model.space.n, offset=0.0)
    result = evaluate_control_dp(gamma, model.with_payoff(zero), scheme, run_id)
    for value_field in result.history:
        value_field.values = -value_field.values
    return result


def solve_risk_measure(model: Model, scheme: Optional[SchemeConfig] = None,
                       run_id: Optional[str] = None) -> SolveResult:
    """rho(h) = Pi(-h): the procedure read as a dynamic risk measure."""
    result = solve(model.with_payoff(model.payoff.negated()), scheme, run_id)
    for value_field in result.history:
        value_field.values = -value_field.values
    return result


def check_time_consistency(model: Model, scheme: Optional[SchemeConfig] = None,
                           t_mid: Union[float, Sequence[float]] = None,
                           outer_scheme: Optional[SchemeConfig] = None,
                           run_id: Optional[str] = None) -> float:
    """Max |composed − single sweep| at level 0.

    The sweep is cut at every node in ``t_mid``; the segment after the last cut
    uses ``scheme``, earlier segments use ``outer_scheme`` when given.
    """
    log = get_run_logger(logger, run_id)
    scheme = scheme or SchemeConfig()
    if t_mid is None:
        t_mid = model.time.time_at(model.time.N // 2)
    splits = [t_mid] if np.isscalar(t_mid) else list(t_mid)
    levels = sorted({model.time.node_index(t) for t in splits})

    single = solve(model, scheme, run_id).level0.values

    inner = BackwardStepper(model, scheme, run_id)
    outer = inner if outer_scheme is None else BackwardStepper(model, outer_scheme, run_id)
    cuts = [0] + levels + [model.time.N]
    w = model.payoff.evaluate(inner.points)
    for position in range(len(cuts) - 1, 0, -1):
        stepper = inner if position == len(cuts) - 1 else outer
        w = stepper.sweep(w, cuts[position - 1], cuts[position])[0].values

    discrepancy = float(np.max(np.abs(w - single)))
    log.info(f"Time consistency with splits at levels {levels}: discrepancy {discrepancy:.3g}")
    return discrepancy


def refined_model(model: Model, level: int) -> Model:
    """Halve dx ``level`` times and quarter dt accordingly (dt ∝ dx²)."""
    factor = 2 ** level
    refined = model.with_space(M=[(m - 1) * factor + 1 for m in model.space.M])
    return refined.with_time(N=model.time.N * factor ** 2)


def closed_form_reference(model: Model, points: np.ndarray) -> np.ndarray:
    """Exact level-0 values where a closed form exists; ValueError otherwise."""
    penalty = model.penalty
    if penalty.family == "zero":
        shift = 0.0
    elif penalty.family == "constant":
        shift = penalty.c
    else:
        raise ValueError(f"no closed form with a '{penalty.family}' penalty")

    candidates = model.gamma.all_candidates()
    if model.gamma.mode != "constant" or any(theta.jumps for theta in candidates):
        raise ValueError("closed forms need a constant Γ without jumps")

    tau = model.time.T - model.time.r
    if len(candidates) == 1:
        theta = candidates[0]
        exact = gaussian_semigroup(model.payoff, theta.a_matrix, theta.b_vec, tau, points)
    elif model.space.n == 1 and all(theta.b[0] == 0 for theta in candidates):
        variances = [theta.a[0][0] for theta in candidates]
        exact = g_heat_reference(model.payoff, min(variances), max(variances), tau, points)
    else:
        raise ValueError("no closed form for this Γ; use the finest-level oracle")
    return exact - shift * tau


def _coarse_sample(values: np.ndarray, level: int) -> np.ndarray:
    stride = 2 ** level
    return values[tuple(slice(None, None, stride) for _ in range(values.ndim))]


def convergence_study(model: Model, levels: int, oracle: str = "closed-form",
                      scheme: Optional[SchemeConfig] = None, run_id: Optional[str] = None) -> List[ConvergenceRow]:
    log = get_run_logger(logger, run_id)
    scheme = scheme or SchemeConfig()
    if levels < 3:
        raise ValueError("levels must be ≥ 3")
    if oracle not in ("closed-form", "finest"):
        raise ValueError(f"unknown oracle '{oracle}'")

    mask = interior_mask(model, scheme)
    coarse_points = model.space.points()[mask]

    solutions = []
    for level in range(levels):
        refined = refined_model(model, level)
        values = solve(refined, scheme, run_id).level0.values
        solutions.append(_coarse_sample(values, level)[mask])
        log.info(f"Refinement level {level}: grid {refined.space.shape}, N={refined.time.N}")

    if oracle == "closed-form":
        reference = closed_form_reference(model, coarse_points)
        compared = range(levels)
    else:
        reference = solutions[-1]
        compared = range(levels - 1)

    rows = []
    for level in compared:
        refined = refined_model(model, level)
        error = float(np.max(np.abs(solutions[level] - reference))) if reference.size else 0.0
        order = None
        if rows and rows[-1].sup_error > 0 and error > 0:
            # each level halves dx (and quarters dt)
            order = math.log2(rows[-1].sup_error / error)
        rows.append(ConvergenceRow(level=level, dx=float(np.min(refined.space.dx)), dt=refined.time.dt,
                                   sup_error=error, observed_order=order))
        log.info(f"Level {level}: sup error {error:.3e}" + (f", observed order {order:.3f}" if order else ""))
    return rows
