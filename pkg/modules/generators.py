from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from modules.core_model import JumpAtom, ParamPoint, Penalty
from utils.logger_config import setup_logger, default_log_file

logger = setup_logger(name=__name__, log_file=default_log_file())


class NonlocalProbeError(RuntimeError):
    def __init__(self, shift, cause):
        super().__init__(f"nonlocal probe failed at shift {list(np.atleast_1d(shift))}: {cause}")
        self.shift = shift


@dataclass(frozen=True, eq=False)
class DerivativeBundle:
    """v(x), Dv(x), D²v(x) and a probe giving v at shifted points."""

    value: float
    gradient: np.ndarray
    hessian: np.ndarray
    probe: Optional[Callable[[np.ndarray], float]] = None

    def __post_init__(self):
        gradient = np.atleast_1d(np.asarray(self.gradient, dtype=float))
        hessian = np.atleast_2d(np.asarray(self.hessian, dtype=float))
        object.__setattr__(self, "gradient", gradient)
        object.__setattr__(self, "hessian", 0.5 * (hessian + hessian.T))

    @property
    def dim(self) -> int:
        return self.gradient.shape[0]

    def combine(self, other: "DerivativeBundle", weight: float) -> "DerivativeBundle":
        """weight·self + (1 − weight)·other, probe included."""
        def probe(z):
            return weight * self.probe(z) + (1.0 - weight) * other.probe(z)

        return DerivativeBundle(
            value=weight * self.value + (1.0 - weight) * other.value,
            gradient=weight * self.gradient + (1.0 - weight) * other.gradient,
            hessian=weight * self.hessian + (1.0 - weight) * other.hessian,
            probe=probe if self.probe is not None and other.probe is not None else None,
        )

    def scaled(self, factor: float) -> "DerivativeBundle":
        probe = None if self.probe is None else (lambda z: factor * self.probe(z))
        return DerivativeBundle(factor * self.value, factor * self.gradient, factor * self.hessian, probe)

    @classmethod
    def of(cls, f: Callable, grad: Callable, hess: Callable, x) -> "DerivativeBundle":
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return cls(value=float(f(x)), gradient=grad(x), hessian=hess(x), probe=lambda z: float(f(z)))


def generator_apply(theta: ParamPoint, bundle: DerivativeBundle) -> float:
    if theta.dim != bundle.dim:
        raise ValueError(f"dimension mismatch: theta has n={theta.dim}, bundle has n={bundle.dim}")
    return float(0.5 * np.sum(theta.a_matrix * bundle.hessian) + theta.b_vec @ bundle.gradient)


def tilde_k(bundle: DerivativeBundle, x, y) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    norm_sq = float(y @ y)
    if norm_sq <= 0:
        raise ValueError("jump vector must be nonzero")
    return float(bundle.probe(x + y) - bundle.value - (y @ bundle.gradient) / (1.0 + norm_sq))


def nonlocal_apply(jumps: Sequence[JumpAtom], bundle: DerivativeBundle, x) -> float:
    total = 0.0
    for atom in jumps:
        try:
            total += atom.lam * tilde_k(bundle, x, atom.vector)
        except Exception as e:
            raise NonlocalProbeError(atom.vector, e) from e
    return total


def hamiltonian(t: float, x, bundle: DerivativeBundle, gamma_set: Sequence[ParamPoint], g: Penalty,
                set_idx: int = 0) -> Tuple[float, int]:
    """max over candidates of L + K − g; ties go to the lowest index."""
    if not gamma_set:
        raise ValueError("empty candidate set")
    best_value, best_index = -np.inf, -1
    for k, theta in enumerate(gamma_set):
        value = generator_apply(theta, bundle) + nonlocal_apply(theta.jumps, bundle, x)
        value -= g.scalar(t, x, theta, set_idx, k)
        if value > best_value:
            best_value, best_index = value, k
    return best_value, best_index


def _smoothstep(u):
    # C² transition from 0 to 1 on [0, 1]
    u = np.clip(u, 0.0, 1.0)
    value = u ** 3 * (10.0 - 15.0 * u + 6.0 * u ** 2)
    first = 30.0 * u ** 2 * (1.0 - u) ** 2
    second = 60.0 * u * (1.0 - u) * (1.0 - 2.0 * u)
    return value, first, second


@dataclass(frozen=True)
class WindowedPolynomial:
    """f(x) = (c0 + c1·x1 + c2·|x|²)·w(|x − center|) with a C² plateau window.

    The window equals 1 up to ``inner`` and vanishes beyond ``outer``, so f is
    C² with compact support and its derivatives are available in closed form.
    """

    c0: float = 0.0
    c1: float = 0.0
    c2: float = 0.0
    inner: float = 5.0
    outer: float = 8.0
    center: Tuple[float, ...] = ()

    def _window(self, x):
        center = np.zeros(x.shape[-1])
        center[:len(self.center)] = self.center
        offset = x - center
        radius = np.sqrt(np.sum(offset * offset, axis=-1))
        s, ds, d2s = _smoothstep((radius - self.inner) / (self.outer - self.inner))
        scale = 1.0 / (self.outer - self.inner)
        phi, dphi, d2phi = 1.0 - s, -ds * scale, -d2s * scale ** 2
        safe = np.where(radius > 0, radius, 1.0)
        unit = offset / safe[..., None]
        return phi, dphi, d2phi, unit, safe

    def _poly(self, x):
        n = x.shape[-1]
        value = self.c0 + self.c1 * x[..., 0] + self.c2 * np.sum(x * x, axis=-1)
        grad = 2.0 * self.c2 * x
        grad[..., 0] += self.c1
        hess = np.broadcast_to(2.0 * self.c2 * np.eye(n), x.shape + (n,))
        return value, grad, hess

    def value(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        phi = self._window(x)[0]
        return self._poly(x)[0] * phi

    def gradient(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        phi, dphi, _, unit, _ = self._window(x)
        p, dp, _ = self._poly(x)
        return dp * phi[..., None] + p[..., None] * dphi[..., None] * unit

    def hessian(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        n = x.shape[-1]
        phi, dphi, d2phi, unit, radius = self._window(x)
        p, dp, d2p = self._poly(x)
        outer = unit[..., :, None] * unit[..., None, :]
        d2w = d2phi[..., None, None] * outer + (dphi / radius)[..., None, None] * (np.eye(n) - outer)
        dw = dphi[..., None] * unit
        cross = dp[..., :, None] * dw[..., None, :] + dw[..., :, None] * dp[..., None, :]
        return d2p * phi[..., None, None] + cross + p[..., None, None] * d2w

    def __call__(self, x) -> np.ndarray:
        return self.value(x)

    def bundle(self, x) -> DerivativeBundle:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return DerivativeBundle(
            value=float(self.value(x)),
            gradient=self.gradient(x),
            hessian=self.hessian(x),
            probe=lambda z: float(self.value(np.asarray(z, dtype=float))),
        )


def generator_field(theta: ParamPoint, f: WindowedPolynomial, x: np.ndarray) -> np.ndarray:
    """(L + K)f at a batch of states x of shape (P, n)."""
    x = np.asarray(x, dtype=float)
    grad = f.gradient(x)
    hess = f.hessian(x)
    value = 0.5 * np.einsum("ij,pij->p", theta.a_matrix, hess) + grad @ theta.b_vec
    if theta.jumps:
        base = f.value(x)
        for atom in theta.jumps:
            y = atom.vector
            compensator = (grad @ y) / (1.0 + atom.norm ** 2)
            value = value + atom.lam * (f.value(x + y) - base - compensator)
    return value
