from typing import Callable, Dict, List, Optional

import numpy as np
from pydantic import BaseModel

from modules.core_model import Model
from modules.generators import WindowedPolynomial
from modules.pde_engine import SchemeConfig, check_time_consistency, evaluate_control_dp, solve
from modules.stochastic_lab import (
    McConfig,
    cocycle_check,
    euler_bias_slope,
    exp_martingale_stat,
    generator_martingale_stat,
    paste_bifurcation,
    paste_composition,
    pasting_locality_check,
    random_control,
)
from utils.logger_config import setup_logger, get_run_logger, default_log_file

logger = setup_logger(name=__name__, log_file=default_log_file())

EXACT_TOLERANCE = 1e-12
SUITES = ("martingale", "cocycle", "pasting", "consistency", "dominance")


class CheckResult(BaseModel):
    suite: str
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""


def _box_center(model: Model) -> np.ndarray:
    return 0.5 * (np.asarray(model.space.lower) + np.asarray(model.space.upper))


def _history_gap(first, second, levels) -> float:
    return float(max(np.max(np.abs(first.values(k) - second.values(k))) for k in levels))


def martingale_suite(model: Model, mc: McConfig, scheme: SchemeConfig, run_id=None) -> List[CheckResult]:
    rng = np.random.default_rng(mc.seed)
    r, T = model.time.r, model.time.T
    y = _box_center(model)
    half_width = 0.5 * float(np.min(np.asarray(model.space.upper) - np.asarray(model.space.lower)))
    results = []

    for k, theta in enumerate(model.gamma.all_candidates()):
        if not theta.jumps:
            theta_vec = rng.uniform(-1.0, 1.0, size=model.space.n)
            stat = exp_martingale_stat(theta, theta_vec, r, T, y, model, mc, run_id)
            results.append(CheckResult(
                suite="martingale", name=f"exp_martingale[{k}]", passed=stat.within(1.0),
                value=abs(stat.mean - 1.0), threshold=stat.confidence * stat.se,
                detail=f"mean {stat.mean:.6g}, se {stat.se:.3g}",
            ))

        f = WindowedPolynomial(c1=1.0, c2=0.5, inner=0.5 * half_width, outer=0.9 * half_width,
                               center=tuple(y.tolist()))
        stat = generator_martingale_stat(theta, f, r, T, y, model, mc, run_id)
        slope = euler_bias_slope(theta, f, r, T, y, model, mc, run_id)
        bias = 2.0 * slope * model.time.dt / mc.substeps
        results.append(CheckResult(
            suite="martingale", name=f"generator_martingale[{k}]", passed=stat.within(0.0, bias),
            value=abs(stat.mean), threshold=stat.confidence * stat.se + bias,
            detail=f"mean {stat.mean:.3g}, se {stat.se:.3g}, Euler bias slope {slope:.3g}",
        ))
    return results


def cocycle_suite(model: Model, mc: McConfig, scheme: SchemeConfig, run_id=None) -> List[CheckResult]:
    N = model.time.N
    if N < 2:
        return [CheckResult(suite="cocycle", name="cocycle", passed=True, value=0.0, threshold=EXACT_TOLERANCE,
                            detail="skipped: needs at least 2 time steps")]
    rng = np.random.default_rng(mc.seed)
    results = []
    for trial in range(3):
        s, t_mid, u = sorted(rng.choice(np.arange(N + 1), size=3, replace=False).tolist())
        gamma = random_control(model, mc.seed + trial)
        residual = cocycle_check(gamma, model.time.time_at(s), model.time.time_at(t_mid), model.time.time_at(u),
                                 _box_center(model), model, mc, run_id)
        results.append(CheckResult(
            suite="cocycle", name=f"cocycle[{s},{t_mid},{u}]", passed=residual.max_abs <= EXACT_TOLERANCE,
            value=residual.max_abs, threshold=EXACT_TOLERANCE,
        ))
    return results


def pasting_suite(model: Model, mc: McConfig, scheme: SchemeConfig, run_id=None) -> List[CheckResult]:
    N = model.time.N
    s_level = N // 2
    gamma = random_control(model, mc.seed)
    delta = random_control(model, mc.seed + 1)

    value_gamma = evaluate_control_dp(gamma, model, scheme, run_id)
    value_delta = evaluate_control_dp(delta, model, scheme, run_id)

    pasted = evaluate_control_dp(paste_composition(gamma, delta, s_level), model, scheme, run_id)
    replay = _history_gap(pasted, value_delta, range(s_level, N + 1))

    region = model.space.points()[..., 0] >= _box_center(model)[0]
    bifurcated = evaluate_control_dp(paste_bifurcation(gamma, delta, s_level, region), model, scheme, run_id)
    expected = np.where(region, value_gamma.values(s_level), value_delta.values(s_level))
    split = float(np.max(np.abs(bifurcated.values(s_level) - expected)))

    locality = pasting_locality_check(gamma, delta, model.time.time_at(s_level), _box_center(model), model, mc,
                                      run_id)
    return [
        CheckResult(suite="pasting", name="composition_replay", passed=replay <= EXACT_TOLERANCE, value=replay,
                    threshold=EXACT_TOLERANCE, detail=f"levels {s_level}..{N}"),
        CheckResult(suite="pasting", name="bifurcation_replay", passed=split <= EXACT_TOLERANCE, value=split,
                    threshold=EXACT_TOLERANCE, detail=f"level {s_level}"),
        CheckResult(suite="pasting", name="penalty_locality", passed=locality <= EXACT_TOLERANCE, value=locality,
                    threshold=EXACT_TOLERANCE, detail=f"{mc.n_paths} common-seed paths"),
    ]


def consistency_suite(model: Model, mc: McConfig, scheme: SchemeConfig, run_id=None) -> List[CheckResult]:
    N = model.time.N
    results = []
    splits = {"single_split": [model.time.time_at(N // 2)]}
    if N >= 3:
        splits["multi_split"] = [model.time.time_at(N // 3), model.time.time_at(2 * N // 3)]
    for name, nodes in splits.items():
        discrepancy = check_time_consistency(model, scheme, nodes, run_id=run_id)
        results.append(CheckResult(suite="consistency", name=name, passed=discrepancy == 0.0, value=discrepancy,
                                   threshold=0.0, detail=f"split times {nodes}"))
    return results


def dominance_suite(model: Model, mc: McConfig, scheme: SchemeConfig, run_id=None,
                    n_controls: int = 10) -> List[CheckResult]:
    # the clamped boundary keeps the scheme monotone up to the box faces
    clamped = scheme.model_copy(update={"boundary": "clamp-to-payoff"})
    optimal = solve(model, clamped, run_id)
    levels = range(model.time.N + 1)

    worst = -np.inf
    for trial in range(n_controls):
        value = evaluate_control_dp(random_control(model, mc.seed + trial), model, clamped, run_id)
        worst = max(worst, max(float(np.max(value.values(k) - optimal.values(k))) for k in levels))

    replay = _history_gap(evaluate_control_dp(optimal.control, model, clamped, run_id), optimal, levels)
    return [
        CheckResult(suite="dominance", name="random_controls_below_optimum", passed=worst <= EXACT_TOLERANCE,
                    value=worst, threshold=EXACT_TOLERANCE, detail=f"{n_controls} random controls"),
        CheckResult(suite="dominance", name="optimal_control_replay", passed=replay <= EXACT_TOLERANCE,
                    value=replay, threshold=EXACT_TOLERANCE),
    ]


SUITE_RUNNERS: Dict[str, Callable] = {
    "martingale": martingale_suite,
    "cocycle": cocycle_suite,
    "pasting": pasting_suite,
    "consistency": consistency_suite,
    "dominance": dominance_suite,
}


def run_suite(suite: str, model: Model, mc: McConfig, scheme: Optional[SchemeConfig] = None,
              run_id: Optional[str] = None) -> List[CheckResult]:
    log = get_run_logger(logger, run_id)
    scheme = scheme or SchemeConfig()
    names = SUITES if suite == "all" else (suite,)
    if any(name not in SUITE_RUNNERS for name in names):
        raise ValueError(f"unknown suite '{suite}'")

    results = []
    for name in names:
        log.info(f"Running {name} suite")
        outcome = SUITE_RUNNERS[name](model, mc, scheme, run_id)
        failed = [r.name for r in outcome if not r.passed]
        if failed:
            log.warning(f"{name} suite: failed checks {failed}")
        results.extend(outcome)
    return results
