import math
from itertools import product
from typing import Callable, Union

import numpy as np
from scipy.special import roots_hermite

from modules.core_model import GammaMap, JumpAtom, Model, ParamPoint, Payoff, Penalty, SpaceGrid, TimeGrid
from utils.logger_config import setup_logger, default_log_file

logger = setup_logger(name=__name__, log_file=default_log_file())

QUADRATURE_START = 64
QUADRATURE_CAP = 512
QUADRATURE_TOLERANCE = 1e-10
CHUNK_NODES = 2_000_000

TINY_STEPS = 4
TINY_CELLS = 7
TINY_CANDIDATES = 3


def _gauss_hermite(h: Callable, x: np.ndarray, shift: np.ndarray, factor: np.ndarray, order: int) -> np.ndarray:
    nodes, weights = roots_hermite(order)
    # far nodes underflow to zero weight
    keep = weights > 0
    nodes, weights = nodes[keep], weights[keep]
    n = x.shape[-1]
    z = np.stack(np.meshgrid(*([nodes] * n), indexing="ij"), axis=-1).reshape(-1, n) * math.sqrt(2.0)
    w = np.prod(np.stack(np.meshgrid(*([weights] * n), indexing="ij"), axis=-1).reshape(-1, n), axis=-1)
    w = w / math.pi ** (n / 2.0)

    displacement = z @ factor.T + shift
    chunk = max(1, CHUNK_NODES // len(w))
    out = np.empty(x.shape[0])
    for lo in range(0, x.shape[0], chunk):
        values = np.asarray(h(x[lo:lo + chunk, None, :] + displacement[None, :, :]), dtype=float)
        out[lo:lo + chunk] = values @ w
    return out


def gaussian_semigroup(h: Union[Payoff, Callable], a, b, tau: float, x) -> np.ndarray:
    """E[h(x + b·tau + chol(a·tau)·Z)] by Gauss–Hermite quadrature, refined until two orders agree."""
    if tau < 0:
        raise ValueError("tau must be ≥ 0")
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x[None]
    n = x.shape[-1]
    flat = x.reshape(-1, n)
    if tau == 0:
        return np.asarray(h(x), dtype=float)

    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.zeros(n) if b is None else np.atleast_1d(np.asarray(b, dtype=float))
    factor = np.linalg.cholesky(a * tau)
    shift = b * tau

    order = QUADRATURE_START
    value = _gauss_hermite(h, flat, shift, factor, order)
    while order < QUADRATURE_CAP:
        order *= 2
        refined = _gauss_hermite(h, flat, shift, factor, order)
        agreed = np.max(np.abs(refined - value)) <= QUADRATURE_TOLERANCE
        value = refined
        if agreed:
            break
    else:
        logger.warning(f"Gauss–Hermite quadrature stopped at order {order} without reaching {QUADRATURE_TOLERANCE:g}")

    if not np.all(np.isfinite(value)):
        raise ValueError("quadrature produced non-finite values")
    return value.reshape(x.shape[:-1])


def g_heat_reference(h: Payoff, a_min: float, a_max: float, tau: float, x) -> np.ndarray:
    """Sublinear heat value for a payoff of known convexity: the extreme variance wins."""
    shape = getattr(h, "convexity", None)
    if shape is None:
        raise ValueError("payoff carries no convexity flag")
    if a_min > a_max:
        raise ValueError("need a_min ≤ a_max")
    x = np.asarray(x, dtype=float)
    n = 1 if x.ndim == 0 else x.shape[-1]
    variance = a_min if shape == "concave" else a_max
    return gaussian_semigroup(h, variance * np.eye(n), None, tau, x)


def _ghost(j: int, M: int, boundary: str, ghost_value: Callable[[int], float]):
    """Coefficients (on w) and a constant giving w at node j, ghosts included."""
    coef = np.zeros(M)
    if 0 <= j < M:
        coef[j] = 1.0
        return coef, 0.0
    if boundary == "clamp-to-payoff":
        return coef, ghost_value(j)
    if j < 0:
        coef[0], coef[1] = 1.0 - j, float(j)
    else:
        d = j - (M - 1)
        coef[M - 1], coef[M - 2] = 1.0 + d, -float(d)
    return coef, 0.0


def _shift_split(y: float, h: float):
    position = y / h
    base = math.floor(position)
    frac = position - base
    if frac < 1e-9:
        frac = 0.0
    elif frac > 1.0 - 1e-9:
        base, frac = base + 1, 0.0
    return int(base), frac


def _explicit_operator(theta: ParamPoint, model: Model, boundary: str, t: float, set_idx: int, cand_idx: int):
    """Dense P, q with update(w) = P·w + q for one candidate on a one-dimensional grid."""
    grid = model.space
    M = grid.M[0]
    h = float(grid.dx[0])
    dt = model.time.dt
    xs = grid.axes()[0]

    def ghost_value(j):
        return float(model.payoff.evaluate(np.array([[grid.lower[0] + j * h]]))[0])

    a = theta.a[0][0]
    drift = float(theta.effective_drift()[0])
    up, down = max(drift, 0.0), max(-drift, 0.0)

    P = np.eye(M)
    q = np.zeros(M)
    for i in range(M):
        terms = [(i + 1, 0.5 * a / h ** 2 + up / h), (i - 1, 0.5 * a / h ** 2 + down / h),
                 (i, -a / h ** 2 - up / h - down / h)]
        for atom in theta.jumps:
            base, frac = _shift_split(atom.y[0], h)
            terms.append((i + base, atom.lam * (1.0 - frac)))
            if frac > 0:
                terms.append((i + base + 1, atom.lam * frac))
            terms.append((i, -atom.lam))
        for j, weight in terms:
            coef, const = _ghost(j, M, boundary, ghost_value)
            P[i] += dt * weight * coef
            q[i] += dt * weight * const
        q[i] -= dt * model.penalty.scalar(t, [xs[i]], theta, set_idx, cand_idx)
    return P, q


def brute_force_dp(model: Model, boundary: str = "linear-extrapolation") -> np.ndarray:
    """Value table (N+1, M) by enumerating every cell-wise candidate assignment at every step."""
    if model.space.n != 1:
        raise ValueError("brute force works on one-dimensional grids only")
    if model.time.N > TINY_STEPS or model.space.M[0] > TINY_CELLS or model.gamma.max_candidates > TINY_CANDIDATES:
        raise ValueError(f"instance exceeds the brute-force caps ({TINY_STEPS} steps, {TINY_CELLS} cells, "
                         f"{TINY_CANDIDATES} candidates)")

    M = model.space.M[0]
    table = np.zeros((model.time.N + 1, M))
    table[-1] = model.payoff.evaluate(model.space.points())
    for level in range(model.time.N - 1, -1, -1):
        t = model.time.time_at(level)
        set_field = model.gamma.set_index_field(t, model.space)
        operators = {}
        for set_idx in np.unique(set_field):
            for cand_idx, theta in enumerate(model.gamma.sets[set_idx]):
                operators[(int(set_idx), cand_idx)] = _explicit_operator(theta, model, boundary, t, int(set_idx),
                                                                          cand_idx)
        choices = [range(len(model.gamma.sets[set_field[i]])) for i in range(M)]
        best = np.full(M, -np.inf)
        for assignment in product(*choices):
            P = np.stack([operators[(int(set_field[i]), k)][0][i] for i, k in enumerate(assignment)])
            q = np.array([operators[(int(set_field[i]), k)][1][i] for i, k in enumerate(assignment)])
            best = np.maximum(best, P @ table[level + 1] + q)
        table[level] = best
    return table


def random_tiny_model(seed: int) -> Model:
    """Small random instance inside the brute-force caps, CFL-safe by construction."""
    rng = np.random.default_rng(seed)
    N = int(rng.integers(1, TINY_STEPS + 1))
    M = int(rng.integers(3, TINY_CELLS + 1))
    mode = str(rng.choice(["constant", "time-dependent", "state-dependent"]))
    n_sets = 1 if mode == "constant" else 2

    sets = []
    for _ in range(n_sets):
        candidates = []
        for _ in range(int(rng.integers(1, TINY_CANDIDATES + 1))):
            jumps = []
            if rng.random() < 0.5:
                y = float(rng.uniform(0.1, 1.0) * rng.choice([-1.0, 1.0]))
                jumps.append(JumpAtom(y=[y], lam=float(rng.uniform(0.0, 1.0))))
            candidates.append(ParamPoint(a=[[float(rng.uniform(0.1, 1.0))]], b=[float(rng.uniform(-1.0, 1.0))],
                                         jumps=jumps))
        sets.append(candidates)

    family = str(rng.choice(["quadratic", "absolute", "smoothed_call", "tabulated"]))
    if family == "tabulated":
        payoff = Payoff(family="tabulated", x=[-1.0, 0.0, 1.0], values=rng.uniform(-1.0, 1.0, size=3).tolist())
    else:
        payoff = Payoff(family=family, strike=float(rng.uniform(-0.5, 0.5)), width=0.2)

    def build(T: float) -> Model:
        breaks = {"constant": [], "time-dependent": [0.5 * T], "state-dependent": [0.0]}[mode]
        return Model(
            name=f"tiny-{seed}",
            time=TimeGrid(r=0.0, T=T, N=N),
            space=SpaceGrid(n=1, lower=[-1.0], upper=[1.0], M=[M]),
            gamma=GammaMap(mode=mode, breaks=breaks, sets=sets),
            penalty=Penalty(family="table", values=penalty_table),
            payoff=payoff,
        )

    # deferred: pde_engine imports this module
    from modules.pde_engine import max_admissible_dt

    penalty_table = [rng.uniform(0.0, 1.0, size=len(s)).tolist() for s in sets]
    dt_max = max_admissible_dt(build(1.0))
    return build(0.9 * N * dt_max)
