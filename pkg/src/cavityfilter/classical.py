"""Mean-reverting disturbance paths and their ensemble statistics."""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError


def time_grid(dt, t_final):
    """Uniform grid 0, dt, ..., n*dt with n = floor(t_final/dt) steps."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if t_final < dt:
        raise ValueError(f"t_final {t_final} shorter than one step {dt}")
    n_steps = int(np.floor(t_final / dt + 1e-9))
    return np.arange(n_steps + 1) * dt


@dataclass(frozen=True)
class OuPath:
    t: np.ndarray
    q: np.ndarray
    seed: object

    def __post_init__(self):
        if len(self.t) != len(self.q):
            raise DimensionError("grid and values have different lengths")


@dataclass(frozen=True)
class EnsembleStats:
    t: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    n: int


def simulate_ou(p, dt, t_final, seed):
    """One Euler path of dq = -u q dt - v dw, deterministic given the seed."""
    q = simulate_ou_ensemble(p, dt, t_final, [seed])[0]
    return OuPath(t=time_grid(dt, t_final), q=q, seed=seed)


def simulate_ou_ensemble(p, dt, t_final, seeds):
    """Euler paths for a list of seeds, one row per seed.

    The recursion q <- q - u*q*dt - v*dW is applied elementwise across rows,
    so each row is bitwise identical to a single-path run with its seed.
    """
    t = time_grid(dt, t_final)
    n_steps = len(t) - 1
    dw = np.empty((len(seeds), n_steps))
    for i, seed in enumerate(seeds):
        rng = np.random.default_rng(seed)
        dw[i] = rng.normal(0.0, np.sqrt(dt), n_steps)
    out = np.empty((len(seeds), n_steps + 1))
    out[:, 0] = p.q0
    q = np.full(len(seeds), float(p.q0))
    for k in range(n_steps):
        q = q - p.u * q * dt - p.v * dw[:, k]
        out[:, k + 1] = q
    return out


def ensemble_stats(paths):
    """Pointwise sample mean and unbiased variance of paths on one shared grid."""
    if len(paths) == 0:
        raise ValueError("empty ensemble")
    t = paths[0].t
    for path in paths[1:]:
        if len(path.t) != len(t) or not np.array_equal(path.t, t):
            raise DimensionError("paths do not share a common grid")
    values = np.stack([path.q for path in paths])
    mean = values.mean(axis=0)
    if len(paths) == 1:
        var = np.zeros_like(mean)
    else:
        var = values.var(axis=0, ddof=1)
    return EnsembleStats(t=t, mean=mean, var=var, n=len(paths))


def ou_analytic_moments(p, t):
    """Exact mean q0*exp(-u t) and variance v^2 (1 - exp(-2 u t)) / (2u)."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("time must be nonnegative")
    mean = p.q0 * np.exp(-p.u * t)
    var = p.v**2 * (1.0 - np.exp(-2.0 * p.u * t)) / (2.0 * p.u)
    return mean, var
