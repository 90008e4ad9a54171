"""Extended Kalman filtering of the quadrature dynamics.

The filter propagates a real 4-vector estimate of (Q1, P1, Q2, P2) and its
covariance through the drift of the quadrature equations linearized at the
current estimate, with the innovation weighted by the Riccati gain. The
filter core is generic over a (f, F, h, H, noise) bundle; the two-cavity
instance is provided by two_cavity_fns and has a compiled fast path.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _backend, _core_py
from .errors import DimensionError, InstabilityError

RICCATI_ABORT_SHIFT = 1e-6
COV_HEALTH_SHIFT = 1e-8


@dataclass(frozen=True)
class NoiseSpec:
    """Process covariance Q (4x4 symmetric PSD), scalar R > 0, cross term S."""

    Q: np.ndarray
    R: float
    S: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.Q, dtype=np.float64)
        s = np.asarray(self.S, dtype=np.float64)
        if q.shape != (4, 4):
            raise DimensionError(f"Q must be 4x4, got {q.shape}")
        if np.abs(q - q.T).max() > 1e-10:
            raise DimensionError("Q is not symmetric")
        if np.linalg.eigvalsh(q)[0] < -1e-10:
            raise DimensionError("Q is not positive semidefinite")
        if not self.R > 0:
            raise DimensionError(f"R must be positive, got {self.R}")
        if s.shape != (4,):
            raise DimensionError(f"S must be a 4-vector, got shape {s.shape}")
        q.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "Q", q)
        object.__setattr__(self, "S", s)


@dataclass(frozen=True)
class EkfState:
    """Estimate vector (Q1, P1, Q2, P2) and symmetric covariance."""

    x_hat: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x_hat, dtype=np.float64)
        p = np.asarray(self.P, dtype=np.float64)
        if x.shape != (4,):
            raise DimensionError(f"x_hat must be a 4-vector, got shape {x.shape}")
        if p.shape != (4, 4):
            raise DimensionError(f"P must be 4x4, got {p.shape}")
        if np.abs(p - p.T).max() > 1e-10:
            raise DimensionError("P is not symmetric within 1e-10")
        x.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "x_hat", x)
        object.__setattr__(self, "P", p)

    def min_covariance_eigenvalue(self):
        return float(np.linalg.eigvalsh(self.P)[0])


@dataclass(frozen=True)
class EkfModelFns:
    """Drift f, Jacobian F, measurement h, constant measurement row H, noise.

    two_cavity_params, when set to (k1, k2, alpha), marks the bundle as the
    standard two-cavity instance and enables the compiled stepping path.
    """

    f: object
    F: object
    h: object
    H: np.ndarray
    noise: NoiseSpec
    two_cavity_params: tuple = field(default=None)


@dataclass(frozen=True)
class EkfTrajectory:
    """Filter output along one record: estimates per grid point, final P."""

    t: np.ndarray
    x_hat: np.ndarray
    P_final: np.ndarray
    health_violations: int


def drift_f(x, model):
    """Quadrature drift at x for the two-cavity model."""
    k1 = model.k1
    k2 = model.mapping.k2
    alpha = model.mapping.alpha
    return np.array(
        [
            -0.5 * k1 * x[0] + x[1] * x[2] / alpha,
            -0.5 * k1 * x[1] - x[0] * x[2] / alpha,
            -0.5 * k2 * x[2],
            -0.5 * k2 * x[3]
            - x[0] * x[0] / (2.0 * alpha)
            - x[1] * x[1] / (2.0 * alpha)
            - 1.0 / (4.0 * alpha),
        ]
    )


def jacobian_F(x, model):
    """Derivative of drift_f at x."""
    k1 = model.k1
    k2 = model.mapping.k2
    alpha = model.mapping.alpha
    return np.array(
        [
            [-0.5 * k1, x[2] / alpha, x[1] / alpha, 0.0],
            [-x[2] / alpha, -0.5 * k1, -x[0] / alpha, 0.0],
            [0.0, 0.0, -0.5 * k2, 0.0],
            [-x[0] / alpha, -x[1] / alpha, 0.0, -0.5 * k2],
        ]
    )


def noise_matrices(model):
    """Noise bundle of the two-cavity model: Q = Gq, R = 1, S = 0."""
    return NoiseSpec(Q=model.Gq, R=1.0, S=np.zeros(4))


def two_cavity_fns(model):
    """EkfModelFns bundle for the two-cavity model."""
    c = model.C.astype(np.float64)

    def f(x):
        return drift_f(x, model)

    def F(x):
        return jacobian_F(x, model)

    def h(x):
        return float(c @ x)

    return EkfModelFns(
        f=f,
        F=F,
        h=h,
        H=c,
        noise=noise_matrices(model),
        two_cavity_params=(model.k1, model.mapping.k2, model.mapping.alpha),
    )


def kalman_gain(state, fns):
    """Gain (P H^T + S) / R as a 4-vector."""
    return (state.P @ fns.H + fns.noise.S) / fns.noise.R


def riccati_step(state, fns, dt):
    """Euler step of the covariance equation, symmetrized.

    P' = P + dt (F P + P F^T + Q - (P H^T + S)(P H^T + S)^T / R), then
    (P' + P'^T)/2. Raises InstabilityError when P' is not positive
    semidefinite within a 1e-6 shift.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    p = state.P
    jac = fns.F(state.x_hat)
    ph = p @ fns.H + fns.noise.S
    p_new = p + dt * (
        jac @ p + p @ jac.T + fns.noise.Q - np.outer(ph, ph) / fns.noise.R
    )
    p_new = 0.5 * (p_new + p_new.T)
    if not np.isfinite(p_new).all():
        raise InstabilityError("covariance diverged; try a smaller dt")
    if not _core_py._psd_shifted(p_new, RICCATI_ABORT_SHIFT):
        raise InstabilityError(
            "covariance lost positive semidefiniteness; try a smaller dt"
        )
    return p_new


def qekf_step(state, dy, dt, fns):
    """One filter step along a measured increment.

    The gain is evaluated at the current state; the estimate moves by
    (f - K h) dt + K dy and the covariance by one Riccati step.
    """
    gain = kalman_gain(state, fns)
    x = state.x_hat
    x_new = x + (fns.f(x) - gain * fns.h(x)) * dt + gain * dy
    p_new = riccati_step(state, fns, dt)
    if not np.isfinite(x_new).all():
        raise InstabilityError("estimate diverged; try a smaller dt")
    return EkfState(x_hat=x_new, P=p_new)


def run_filter(fns, x0, p0, record):
    """Run the filter along a record; deterministic given (x0, p0, record).

    The two-cavity bundle steps through the active kernel backend; other
    bundles run the generic recursion. Returns an EkfTrajectory whose
    health_violations counts covariance steps that failed the PSD test at a
    1e-8 shift.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    p0 = np.asarray(p0, dtype=np.float64)
    dt = record.dt
    if fns.two_cavity_params is not None:
        k1, k2, alpha = fns.two_cavity_params
        xs, p_final, health = _backend.qekf_run(
            x0, p0, record.dy, dt, k1, k2, alpha, RICCATI_ABORT_SHIFT, COV_HEALTH_SHIFT
        )
        return EkfTrajectory(
            t=record.t, x_hat=xs, P_final=p_final, health_violations=health
        )

    state = EkfState(x_hat=x0, P=0.5 * (p0 + p0.T))
    xs = np.empty((len(record.dy) + 1, 4))
    xs[0] = state.x_hat
    health = 0
    for k, dy in enumerate(record.dy):
        state = qekf_step(state, dy, dt, fns)
        if not _core_py._psd_shifted(state.P, COV_HEALTH_SHIFT):
            health += 1
        xs[k + 1] = state.x_hat
    return EkfTrajectory(
        t=record.t, x_hat=xs, P_final=state.P, health_violations=health
    )
