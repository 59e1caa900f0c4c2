import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.stats import poisson

from modules.core_model import Bifurcation, Control, ControlError, Model, ParamPoint, Payoff
from modules.generators import WindowedPolynomial, generator_field
from modules.pde_engine import SchemeConfig, evaluate_control_dp
from utils.logger_config import setup_logger, get_run_logger, default_log_file

logger = setup_logger(name=__name__, log_file=default_log_file())

EXCURSION_WARNING = 0.01


class DomainError(ValueError):
    pass


class McConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_paths: int = Field(ge=1)
    seed: int = Field(ge=0)
    substeps: int = Field(default=1, ge=1)
    confidence: float = Field(default=3.0, gt=0)
    batch_size: int = Field(default=8192, ge=1)
    threads: int = Field(default=1, ge=1)
    # >1: Brownian increments are sums of a finer run's (substeps·coarsen per step) normals
    coarsen: int = Field(default=1, ge=1)


class McEstimate(BaseModel):
    quantity: str
    r: float
    y: List[float]
    mean: float
    se: float = Field(ge=0)
    n_paths: int
    seed: int
    max_abs: float = 0.0
    excursion_fraction: float = 0.0
    confidence: float = 3.0

    def margin(self, target: float) -> float:
        """Distance to ``target`` in units of standard errors (inf when SE is 0 and they differ)."""
        gap = abs(self.mean - target)
        if self.se == 0:
            return 0.0 if gap == 0 else math.inf
        return gap / self.se

    def within(self, target: float, extra: float = 0.0) -> bool:
        return abs(self.mean - target) <= self.confidence * self.se + extra


@dataclass(frozen=True)
class JumpEvent:
    time: float
    slot: int
    count: int
    y: Tuple[float, ...]


@dataclass(eq=False)
class PathSample:
    """One recorded trajectory. Row k of the applied arrays covers the substep starting at times[k]."""

    path_index: int
    seed: int
    times: np.ndarray
    states: np.ndarray
    penalty_acc: np.ndarray
    set_indices: np.ndarray
    candidate_indices: np.ndarray
    applied: List[ParamPoint]
    jump_counts: np.ndarray
    jump_log: List[JumpEvent]


@dataclass(frozen=True, eq=False)
class _CandidateArrays:
    chol: np.ndarray
    drift: np.ndarray
    b: np.ndarray
    jump_y: np.ndarray
    jump_lam: np.ndarray

    @property
    def n_atoms(self) -> int:
        return self.jump_lam.shape[-1]


@dataclass(eq=False)
class _Paths:
    x_end: np.ndarray
    penalty: np.ndarray
    integral: np.ndarray
    jump_counts: np.ndarray
    excursion: np.ndarray
    increments: Optional[np.ndarray] = None
    marked: Optional[np.ndarray] = None
    trajectory: Optional[List[Tuple[float, np.ndarray, np.ndarray, np.ndarray]]] = None
    applied: Optional[List[Tuple[np.ndarray, np.ndarray]]] = None


def _compile_candidates(model: Model) -> _CandidateArrays:
    sets = model.gamma.sets
    n = model.space.n
    width = model.gamma.max_candidates
    atoms = max(len(theta.jumps) for theta in model.gamma.all_candidates())

    chol = np.zeros((len(sets), width, n, n))
    drift = np.zeros((len(sets), width, n))
    b = np.zeros((len(sets), width, n))
    jump_y = np.zeros((len(sets), width, atoms, n))
    jump_lam = np.zeros((len(sets), width, atoms))
    for s, candidates in enumerate(sets):
        for k, theta in enumerate(candidates):
            try:
                chol[s, k] = np.linalg.cholesky(theta.a_matrix)
            except np.linalg.LinAlgError as e:
                raise ValueError(f"candidate {k} of set {s}: Cholesky factorization of a failed") from e
            drift[s, k] = theta.effective_drift()
            b[s, k] = theta.b_vec
            for j, atom in enumerate(theta.jumps):
                jump_y[s, k, j] = atom.vector
                jump_lam[s, k, j] = atom.lam
    return _CandidateArrays(chol, drift, b, jump_y, jump_lam)


def _path_draws(seed: int, path_index: int, rows: int, n: int, atoms: int, coarsen: int = 1):
    # normals first, then uniforms; rows are indexed by absolute substep so restarts replay the stream
    rng = np.random.default_rng(np.random.SeedSequence([seed, path_index]))
    normals = rng.standard_normal((rows * coarsen, n))
    uniforms = rng.random((rows * coarsen, atoms))
    if coarsen > 1:
        normals = normals.reshape(rows, coarsen, n).sum(axis=1) / math.sqrt(coarsen)
        uniforms = uniforms[::coarsen]
    return normals, uniforms


def check_start(model: Model, r: float, y) -> int:
    """Start level for a requested (r, y); DomainError when it lies outside the horizon or the box."""
    if not model.time.r <= r < model.time.T:
        raise DomainError(f"start time {r} lies outside the horizon [{model.time.r}, {model.time.T})")
    start_level = model.time.node_index(r)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if y.shape != (model.space.n,):
        raise ValueError(f"starting state must have {model.space.n} component(s), got {y.tolist()}")
    if not model.space.contains(y):
        raise DomainError(f"starting state {y.tolist()} lies outside the space box")
    return start_level


def _check_restart(control: Control, start_level: int):
    if control.bifurcation is not None and control.bifurcation.level < start_level:
        raise ControlError(
            f"cannot start at level {start_level}: the control bifurcates earlier, at level {control.bifurcation.level}"
        )


def _selections(groups, level: int, cells, size: int):
    """Route paths through bifurcations at ``level`` and read every path's selector."""
    routed = []
    pending = list(groups)
    while pending:
        control, idx = pending.pop(0)
        bif: Optional[Bifurcation] = control.bifurcation
        if bif is not None and bif.level == level:
            inside = bif.region[tuple(c[idx] for c in cells)]
            pending.append((bif.on_region, idx[inside]))
            pending.append((bif.off_region, idx[~inside]))
            continue
        routed.append((control, idx))

    cand = np.zeros(size, dtype=np.int64)
    for control, idx in routed:
        if idx.size:
            cand[idx] = control.selector_at(level)[tuple(c[idx] for c in cells)]
    return routed, cand


def _simulate_batch(control: Control, model: Model, arrays: _CandidateArrays, start_level: int, end_level: int,
                    y: np.ndarray, indices: np.ndarray, mc: McConfig,
                    integrand: Optional[Callable] = None, keep_increments: bool = False,
                    mark_level: Optional[int] = None, record: bool = False) -> _Paths:
    grid = model.space
    time_grid = model.time
    n = grid.n
    size = len(indices)
    substeps = mc.substeps
    delta = time_grid.dt / substeps
    root_delta = math.sqrt(delta)

    draws = [_path_draws(mc.seed, int(i), time_grid.N * substeps, n, arrays.n_atoms, mc.coarsen) for i in indices]
    normals = np.stack([d[0] for d in draws])
    uniforms = np.stack([d[1] for d in draws])

    x = np.array(np.broadcast_to(y, (size, n)), dtype=float)
    penalty = np.zeros(size)
    integral = np.zeros(size)
    counts = np.zeros((size, arrays.n_atoms))
    excursion = ~grid.contains(x)
    increments = np.zeros((size, end_level - start_level)) if keep_increments else None
    marked = x.copy() if mark_level == start_level else None
    trajectory = None
    applied = None
    if record:
        trajectory = [(time_grid.time_at(start_level), x.copy(), penalty.copy(), np.zeros((size, arrays.n_atoms)))]
        applied = []

    groups = [(control, np.arange(size))]
    for level in range(start_level, end_level):
        t_level = time_grid.time_at(level)
        cells = grid.nearest_cell(x)
        groups, cand = _selections(groups, level, cells, size)
        set_idx = model.gamma.set_index_field(t_level, grid)[cells]

        chol = arrays.chol[set_idx, cand]
        drift = arrays.drift[set_idx, cand]
        b = arrays.b[set_idx, cand]
        jump_y = arrays.jump_y[set_idx, cand]
        jump_lam = arrays.jump_lam[set_idx, cand]

        accrued = np.zeros(size)
        for sub in range(substeps):
            row = level * substeps + sub
            t = t_level + sub * delta

            accrued += model.penalty.evaluate(t, x, b, set_idx, cand) * delta
            if integrand is not None:
                integral += integrand(t, x) * delta

            z = normals[:, row, :]
            if record:
                applied.append((set_idx.copy(), cand.copy()))
                sub_arrivals = np.zeros((size, arrays.n_atoms))
            step = drift * delta
            for i in range(n):
                for j in range(i + 1):
                    step[:, i] += root_delta * chol[:, i, j] * z[:, j]
            for a in range(arrays.n_atoms):
                lam = jump_lam[:, a]
                active = lam > 0
                arrivals = np.zeros(size)
                if np.any(active):
                    arrivals[active] = np.maximum(poisson.ppf(uniforms[active, row, a], lam[active] * delta), 0.0)
                counts[:, a] += arrivals
                if record:
                    sub_arrivals[:, a] = arrivals
                for i in range(n):
                    step[:, i] += arrivals * jump_y[:, a, i]
            x = x + step
            excursion |= ~grid.contains(x)
            if record:
                trajectory.append((t + delta, x.copy(), penalty + accrued, sub_arrivals))

        penalty += accrued
        if keep_increments:
            increments[:, level - start_level] = accrued
        if mark_level == level + 1:
            marked = x.copy()

    return _Paths(x, penalty, integral, counts, excursion, increments, marked, trajectory, applied)


def simulate(control: Control, model: Model, r: float, y, mc: McConfig, end_time: Optional[float] = None,
             integrand: Optional[Callable] = None, keep_increments: bool = False,
             mark_time: Optional[float] = None, run_id: Optional[str] = None) -> _Paths:
    """Simulate mc.n_paths paths from (r, y) under a feedback control.

    ``y`` is one state or one state per path. Paths are cut into fixed batches of
    ``mc.batch_size``; the thread count never changes which draws a path uses.
    """
    log = get_run_logger(logger, run_id)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if y.ndim == 2 and y.shape[0] != mc.n_paths:
        raise ValueError("need one starting state per path")
    # per-path restarts may begin outside the box; a single requested state may not
    start_level = model.time.node_index(r) if y.ndim == 2 else check_start(model, r, y)
    end_level = model.time.N if end_time is None else model.time.node_index(end_time)
    mark_level = None if mark_time is None else model.time.node_index(mark_time)
    if end_level <= start_level:
        raise ValueError(f"end time must lie after r={r}")

    control.validate(model)
    _check_restart(control, start_level)
    arrays = _compile_candidates(model)

    batches = [np.arange(lo, min(lo + mc.batch_size, mc.n_paths)) for lo in range(0, mc.n_paths, mc.batch_size)]

    def run(indices):
        batch_y = y[indices] if y.ndim == 2 else y
        return _simulate_batch(control, model, arrays, start_level, end_level, batch_y, indices, mc,
                               integrand=integrand, keep_increments=keep_increments, mark_level=mark_level)

    if mc.threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=mc.threads) as pool:
            parts = list(pool.map(run, batches))
    else:
        parts = [run(indices) for indices in batches]

    paths = _Paths(
        x_end=np.concatenate([p.x_end for p in parts]),
        penalty=np.concatenate([p.penalty for p in parts]),
        integral=np.concatenate([p.integral for p in parts]),
        jump_counts=np.concatenate([p.jump_counts for p in parts]),
        excursion=np.concatenate([p.excursion for p in parts]),
        increments=np.concatenate([p.increments for p in parts]) if keep_increments else None,
        marked=np.concatenate([p.marked for p in parts]) if mark_level is not None else None,
    )

    fraction = float(np.mean(paths.excursion))
    if fraction > EXCURSION_WARNING:
        log.warning(f"{fraction:.2%} of paths left the space box; selections used the clamped nearest cell")
    log.info(f"Simulated {mc.n_paths} paths in {len(batches)} batch(es), levels {start_level}..{end_level}, "
             f"{mc.substeps} substep(s) per level")
    return paths


def estimate(quantity: str, samples: np.ndarray, mc: McConfig, r: float, y, excursion: float = 0.0) -> McEstimate:
    samples = np.asarray(samples, dtype=float)
    count = samples.size
    if np.all(samples == samples[0]):
        mean, se = float(samples[0]), 0.0
    else:
        mean = math.fsum(samples) / count
        variance = math.fsum((samples - mean) ** 2) / (count - 1)
        se = math.sqrt(variance / count)
    return McEstimate(
        quantity=quantity, r=r, y=[float(v) for v in np.atleast_1d(y)], mean=mean, se=se, n_paths=count,
        seed=mc.seed, max_abs=float(np.max(np.abs(samples))), excursion_fraction=excursion,
        confidence=mc.confidence,
    )


def _payoff_values(h: Union[Payoff, Callable, None], model: Model, x: np.ndarray) -> np.ndarray:
    h = model.payoff if h is None else h
    return np.asarray(h(x), dtype=float)


def sample_path(gamma: Control, r: float, y, model: Model, mc: McConfig, path_index: int) -> PathSample:
    start_level = check_start(model, r, y)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    gamma.validate(model)
    _check_restart(gamma, start_level)
    arrays = _compile_candidates(model)
    paths = _simulate_batch(gamma, model, arrays, start_level, model.time.N, y, np.array([path_index]), mc,
                            record=True)

    set_indices = np.array([int(s[0]) for s, _ in paths.applied], dtype=np.int64)
    candidate_indices = np.array([int(k[0]) for _, k in paths.applied], dtype=np.int64)
    jump_log = []
    # arrivals at row k + 1 happened during the substep that began at row k
    for row, (t, _, _, arrivals) in enumerate(paths.trajectory[1:]):
        s, k = set_indices[row], candidate_indices[row]
        for slot, count in enumerate(arrivals[0]):
            if count > 0:
                jump_log.append(JumpEvent(time=float(t), slot=slot, count=int(count),
                                          y=tuple(float(v) for v in arrays.jump_y[s, k, slot])))

    return PathSample(
        path_index=path_index,
        seed=mc.seed,
        times=np.array([t for t, _, _, _ in paths.trajectory]),
        states=np.stack([x[0] for _, x, _, _ in paths.trajectory]),
        penalty_acc=np.array([p[0] for _, _, p, _ in paths.trajectory]),
        set_indices=set_indices,
        candidate_indices=candidate_indices,
        applied=[model.gamma.sets[s][k] for s, k in zip(set_indices, candidate_indices)],
        jump_counts=paths.jump_counts[0],
        jump_log=jump_log,
    )


def mc_expectation(gamma: Control, h: Union[Payoff, Callable, None], r: float, y, model: Model, mc: McConfig,
                   run_id: Optional[str] = None) -> McEstimate:
    paths = simulate(gamma, model, r, y, mc, run_id=run_id)
    return estimate("expectation", _payoff_values(h, model, paths.x_end), mc, r, y, float(np.mean(paths.excursion)))


def mc_penalty(gamma: Control, r: float, y, model: Model, mc: McConfig, run_id: Optional[str] = None) -> McEstimate:
    paths = simulate(gamma, model, r, y, mc, run_id=run_id)
    return estimate("penalty", paths.penalty, mc, r, y, float(np.mean(paths.excursion)))


def mc_lower_bound(gamma: Control, h: Union[Payoff, Callable, None], r: float, y, model: Model, mc: McConfig,
                   run_id: Optional[str] = None) -> McEstimate:
    """E[h(X_T)] − α on common paths."""
    paths = simulate(gamma, model, r, y, mc, run_id=run_id)
    samples = _payoff_values(h, model, paths.x_end) - paths.penalty
    return estimate("lower_bound", samples, mc, r, y, float(np.mean(paths.excursion)))


def mc_report(gamma: Control, r: float, y, model: Model, mc: McConfig,
              run_id: Optional[str] = None) -> List[McEstimate]:
    """Expectation, penalty and lower bound from one set of paths."""
    paths = simulate(gamma, model, r, y, mc, run_id=run_id)
    excursion = float(np.mean(paths.excursion))
    payoff = _payoff_values(None, model, paths.x_end)
    return [
        estimate("expectation", payoff, mc, r, y, excursion),
        estimate("penalty", paths.penalty, mc, r, y, excursion),
        estimate("lower_bound", payoff - paths.penalty, mc, r, y, excursion),
    ]


def exp_martingale_stat(theta: ParamPoint, theta_vec, r: float, t: float, y, model: Model, mc: McConfig,
                        run_id: Optional[str] = None) -> McEstimate:
    """exp{v·(X_t − X_r) − (t − r)(v·b + v·a·v/2)} under the diffusion theta; mean 1."""
    if theta.jumps:
        raise ValueError("the exponential martingale check needs a candidate without jumps")
    theta_vec = np.atleast_1d(np.asarray(theta_vec, dtype=float))
    pinned = model.pinned(theta)
    paths = simulate(Control.constant(pinned), pinned, r, y, mc, end_time=t, run_id=run_id)

    elapsed = t - r
    exponent = (paths.x_end - np.asarray(y, dtype=float)) @ theta_vec
    exponent -= elapsed * (theta_vec @ theta.b_vec + 0.5 * theta_vec @ theta.a_matrix @ theta_vec)
    return estimate("exp_martingale", np.exp(exponent), mc, r, y, float(np.mean(paths.excursion)))


def generator_martingale_stat(theta: ParamPoint, f: WindowedPolynomial, r: float, t: float, y, model: Model,
                              mc: McConfig, run_id: Optional[str] = None) -> McEstimate:
    """f(X_t) − f(X_r) − ∫(L + K)f(X_u)du under theta; mean 0 up to the Euler bias."""
    pinned = model.pinned(theta)
    paths = simulate(Control.constant(pinned), pinned, r, y, mc, end_time=t,
                     integrand=lambda _, x: generator_field(theta, f, x), run_id=run_id)
    start = float(f(np.atleast_1d(np.asarray(y, dtype=float))))
    samples = f(paths.x_end) - start - paths.integral
    return estimate("generator_martingale", samples, mc, r, y, float(np.mean(paths.excursion)))


def euler_bias_slope(theta: ParamPoint, f: WindowedPolynomial, r: float, t: float, y, model: Model,
                     mc: McConfig, run_id: Optional[str] = None) -> float:
    """|mean(Z; δ) − mean(Z; δ/2)| / (δ/2), measured by halving the substep.

    Both runs share Brownian increments: each coarse increment is the sum of two fine ones.
    """
    fine_mc = mc.model_copy(update={"substeps": 2 * mc.substeps, "coarsen": 1})
    coarse = generator_martingale_stat(theta, f, r, t, y, model, mc.model_copy(update={"coarsen": 2}), run_id)
    fine = generator_martingale_stat(theta, f, r, t, y, model, fine_mc, run_id)
    delta = model.time.dt / mc.substeps
    return abs(coarse.mean - fine.mean) / (0.5 * delta)


def _head(control: Control, s_level: int) -> Tuple[Tuple[int, ...], Tuple[np.ndarray, ...]]:
    """The control's own subdivision and selectors cut at ``s_level``."""
    points = [level for level in control.subdivision if level < s_level] + [s_level]
    selectors = tuple(control.selectors[control.interval_of(level)] for level in points[:-1])
    return tuple(points), selectors


def _tail(control: Control, s_level: int) -> Tuple[Tuple[int, ...], Tuple[np.ndarray, ...]]:
    points = [s_level] + [level for level in control.subdivision if level > s_level]
    selectors = tuple(control.selectors[control.interval_of(level)] for level in points[:-1])
    return tuple(points), selectors


def _check_node(s_level: int):
    if s_level < 0:
        raise ControlError(f"level {s_level} is not a node of the time grid")


def paste_composition(gamma: Control, delta: Control, s_level: int) -> Control:
    """Follow gamma before level s and delta from s on."""
    _check_node(s_level)
    if gamma.bifurcation is not None and gamma.bifurcation.level < s_level:
        bif = gamma.bifurcation
        return Control(gamma.subdivision, gamma.selectors, Bifurcation(
            bif.level, bif.region,
            paste_composition(bif.on_region, delta, s_level),
            paste_composition(bif.off_region, delta, s_level),
        ))
    if delta.bifurcation is not None and delta.bifurcation.level < s_level:
        raise ControlError("delta bifurcates before the pasting level; its branch is not determined after it")
    if s_level > delta.end_level and delta.bifurcation is None:
        raise ControlError(f"level {s_level} is past the end of the control")

    if s_level == 0:
        return delta
    if s_level >= delta.end_level and delta.bifurcation is None:
        head_points, head_selectors = _head(gamma, s_level)
        return Control(head_points, head_selectors)

    head_points, head_selectors = _head(gamma, s_level)
    if s_level == delta.end_level:
        return Control(head_points, head_selectors, delta.bifurcation)
    tail_points, tail_selectors = _tail(delta, s_level)
    return Control(head_points[:-1] + tail_points, head_selectors + tail_selectors, delta.bifurcation)


def paste_bifurcation(gamma: Control, delta: Control, s_level: int, region) -> Control:
    """gamma before s; from s on gamma on cells in ``region`` at level s, delta elsewhere."""
    _check_node(s_level)
    if gamma.bifurcation is not None and gamma.bifurcation.level < s_level:
        raise ControlError("gamma bifurcates before the pasting level")
    region = np.asarray(region, dtype=bool)
    head_points, head_selectors = _head(gamma, s_level)
    return Control(head_points, head_selectors, Bifurcation(s_level, region, gamma, delta))


def region_from_predicate(model: Model, predicate: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    return np.asarray(predicate(model.space.points()), dtype=bool)


def cocycle_check(gamma: Control, s: float, t_mid: float, u: float, y, model: Model, mc: McConfig,
                  run_id: Optional[str] = None) -> McEstimate:
    """Per-path ∫ₛᵘg − ∫ₛᵗg − ∫ₜᵘg from the per-level penalty sums."""
    levels = [model.time.node_index(v) for v in (s, t_mid, u)]
    if not levels[0] < levels[1] < levels[2]:
        raise ValueError("need s < t_mid < u")
    paths = simulate(gamma, model, s, y, mc, end_time=u, keep_increments=True, run_id=run_id)
    pieces = paths.increments
    cut = levels[1] - levels[0]
    residual = pieces.sum(axis=1) - pieces[:, :cut].sum(axis=1) - pieces[:, cut:].sum(axis=1)
    return estimate("cocycle_residual", residual, mc, s, y, float(np.mean(paths.excursion)))


def random_control(model: Model, seed: int, n_intervals: int = 3) -> Control:
    """Random subdivision with random selectors valid at every level of their interval."""
    rng = np.random.default_rng(seed)
    N = model.time.N
    cuts = min(max(n_intervals, 1) - 1, N - 1)
    inner = sorted(rng.choice(np.arange(1, N), size=cuts, replace=False).tolist()) if cuts > 0 else []
    subdivision = tuple([0] + [int(v) for v in inner] + [N])

    set_sizes = np.array([len(candidates) for candidates in model.gamma.sets])
    selectors = []
    for lo, hi in zip(subdivision, subdivision[1:]):
        sizes = np.min([set_sizes[model.gamma.set_index_field(model.time.time_at(level), model.space)]
                        for level in range(lo, hi)], axis=0)
        selectors.append(np.floor(rng.random(model.space.shape) * sizes).astype(np.int64))
    return Control(subdivision, tuple(selectors), labels={"source": f"random:{seed}"})


def restart_spot_check(gamma: Control, s: float, x, h: Optional[Payoff], model: Model, mc: McConfig,
                       scheme: Optional[SchemeConfig] = None, run_id: Optional[str] = None) -> Tuple[McEstimate, float]:
    """MC value of gamma restarted at (s, x) next to the control sweep at the nearest cell."""
    target = model if h is None else model.with_payoff(h)
    field = evaluate_control_dp(gamma, target, scheme, run_id).values(model.time.node_index(s))
    cell = model.space.nearest_cell(np.atleast_1d(np.asarray(x, dtype=float)))
    return mc_lower_bound(gamma, h, s, x, model, mc, run_id), float(field[cell])


def pasting_locality_check(gamma: Control, delta: Control, s: float, y, model: Model, mc: McConfig,
                           run_id: Optional[str] = None) -> float:
    """Max per-path gap between the pasted control's penalty on [s, T] and delta's after a restart at X_s."""
    s_level = model.time.node_index(s)
    pasted = paste_composition(gamma, delta, s_level)
    full = simulate(pasted, model, model.time.r, y, mc, keep_increments=True, mark_time=s, run_id=run_id)
    restarted = simulate(delta, model, s, full.marked, mc, keep_increments=True, run_id=run_id)
    after = full.increments[:, s_level:].sum(axis=1)
    replay = restarted.increments.sum(axis=1)
    return float(np.max(np.abs(after - replay)))


def jump_count_stat(gamma: Control, r: float, y, model: Model, mc: McConfig,
                    run_id: Optional[str] = None) -> List[Tuple[McEstimate, McEstimate]]:
    """Per atom slot: (mean count, sample variance) estimates over [r, T]."""
    paths = simulate(gamma, model, r, y, mc, run_id=run_id)
    stats = []
    for slot in range(paths.jump_counts.shape[1]):
        counts = paths.jump_counts[:, slot]
        mean = estimate(f"jump_count[{slot}]", counts, mc, r, y)
        spread = estimate(f"jump_count_variance[{slot}]", (counts - mean.mean) ** 2, mc, r, y)
        stats.append((mean, spread))
    return stats
