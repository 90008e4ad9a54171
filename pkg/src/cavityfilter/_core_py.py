"""Pure numpy stepping kernels. Fallback backend; arithmetic reference.

The compiled backend in _core.pyx mirrors these loops operation for
operation. Keep the two in sync when touching either.
"""

import numpy as np

from .errors import InstabilityError

BACKEND_KIND = "python"


def _psd_shifted(mat, shift):
    # Cholesky feasibility of mat + shift*I, the cheap PSD-within-shift test.
    try:
        np.linalg.cholesky(mat + shift * np.eye(mat.shape[0]))
        return True
    except np.linalg.LinAlgError:
        return False


def sme_run(rho0, h, l0, l1, noise, dt, generate, obs, clip_trigger, abort_tol, keep_states):
    """Euler stepping of the conditional state along one record.

    Parameters
    ----------
    rho0 : (d, d) complex ndarray
    h, l0, l1 : (d, d) complex ndarrays
        Hamiltonian and the two coupling channels; channel 0 is measured.
    noise : (n,) float ndarray
        Wiener increments when ``generate`` is true, otherwise the recorded
        measurement increments dy.
    generate : bool
        If true, emit dy_k = m_k dt + noise_k with m_k the predicted
        measurement; otherwise consume noise as dy.
    obs : (n_obs, d, d) complex ndarray
        Observables whose real expectations are recorded at every grid point.
    clip_trigger : float
        Repair the state (clip negative eigenvalues, renormalize) when its
        minimum eigenvalue falls below this (negative) value.
    abort_tol : float
        Raise InstabilityError if the minimum eigenvalue is below this even
        after repair, or the trace collapses.
    keep_states : bool
        If false, only the final state is returned in ``states``.

    Returns
    -------
    (obs_out, dy_out, states, diag)
        obs_out : (n_obs, n+1) float; dy_out : (n,) float;
        states : (n+1, d, d) or (1, d, d) complex;
        diag : (4, n+1) float, rows (min_eig, purity, trace_err, herm_err).
    """
    d = rho0.shape[0]
    n_steps = len(noise)
    l0d = l0.conj().T
    l1d = l1.conj().T
    n0 = l0d @ l0
    n1 = l1d @ l1
    obs_flat = np.ascontiguousarray(obs.reshape(obs.shape[0], d * d))

    obs_out = np.empty((obs.shape[0], n_steps + 1))
    dy_out = np.empty(n_steps)
    states = np.empty((n_steps + 1 if keep_states else 1, d, d), dtype=np.complex128)
    diag = np.empty((4, n_steps + 1))

    rho = np.array(rho0, dtype=np.complex128)
    rho = 0.5 * (rho + rho.conj().T)
    tr = np.trace(rho).real
    if not np.isfinite(tr) or tr <= 1e-12:
        raise InstabilityError(f"initial state trace {tr} is not usable")
    rho = rho / tr

    def _record(k, min_eig):
        obs_out[:, k] = (obs_flat @ rho.T.ravel()).real
        diag[0, k] = min_eig
        diag[1, k] = np.vdot(rho, rho).real
        diag[2, k] = abs(np.trace(rho).real - 1.0)
        diag[3, k] = np.abs(rho - rho.conj().T).max()
        if keep_states:
            states[k] = rho

    _record(0, np.linalg.eigvalsh(rho)[0])

    for k in range(n_steps):
        b0 = l0 @ rho
        m = 2.0 * np.trace(b0).real
        dy = m * dt + noise[k] if generate else noise[k]
        dy_out[k] = dy

        a = h @ rho
        b1 = l1 @ rho
        d0 = n0 @ rho
        d1 = n1 @ rho
        drift = (
            -1j * (a - a.conj().T)
            + b0 @ l0d
            - 0.5 * (d0 + d0.conj().T)
            + b1 @ l1d
            - 0.5 * (d1 + d1.conj().T)
        )
        rho = rho + drift * dt + (b0 + b0.conj().T - m * rho) * (dy - m * dt)

        rho = 0.5 * (rho + rho.conj().T)
        tr = np.trace(rho).real
        if not np.isfinite(tr) or tr <= 1e-12:
            raise InstabilityError(
                f"state trace collapsed at step {k + 1} (trace {tr}); try a smaller dt"
            )
        rho = rho / tr
        try:
            w, vec = np.linalg.eigh(rho)
        except np.linalg.LinAlgError as exc:
            raise InstabilityError(
                f"eigendecomposition failed at step {k + 1}; try a smaller dt"
            ) from exc
        min_eig = w[0]
        if min_eig < clip_trigger:
            w = np.clip(w, 0.0, None)
            rho = (vec * w) @ vec.conj().T
            rho = 0.5 * (rho + rho.conj().T)
            rho = rho / np.trace(rho).real
            min_eig = np.linalg.eigvalsh(rho)[0]
        if not np.isfinite(min_eig) or min_eig < abort_tol:
            raise InstabilityError(
                f"state positivity lost at step {k + 1} (min eigenvalue {min_eig:.3e}); "
                "try a smaller dt"
            )
        _record(k + 1, min_eig)

    if not keep_states:
        states[0] = rho
    return obs_out, dy_out, states, diag


def qekf_run(x0, p0, dy, dt, k1, k2, alpha, abort_tol, health_tol):
    """Extended Kalman recursion specialized to the two-cavity quadrature model.

    Returns (xs, P, health_violations): the estimate series (n+1, 4), the
    final covariance, and the number of steps whose covariance failed the
    PSD-within-health_tol test. Raises InstabilityError when the covariance
    loses positive semidefiniteness beyond abort_tol or the state leaves the
    finite range.
    """
    n_steps = len(dy)
    x = np.array(x0, dtype=float)
    p = np.array(p0, dtype=float)
    p = 0.5 * (p + p.T)
    q_proc = np.diag([k1 / 4.0, k1 / 4.0, k2 / 4.0, k2 / 4.0])
    c0 = 2.0 * np.sqrt(k1)

    xs = np.empty((n_steps + 1, 4))
    xs[0] = x
    health = 0

    for k in range(n_steps):
        gain = c0 * p[:, 0]
        h_pred = c0 * x[0]
        f = np.array(
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
        jac = np.array(
            [
                [-0.5 * k1, x[2] / alpha, x[1] / alpha, 0.0],
                [-x[2] / alpha, -0.5 * k1, -x[0] / alpha, 0.0],
                [0.0, 0.0, -0.5 * k2, 0.0],
                [-x[0] / alpha, -x[1] / alpha, 0.0, -0.5 * k2],
            ]
        )
        x = x + (f - gain * h_pred) * dt + gain * dy[k]
        p = p + dt * (jac @ p + p @ jac.T + q_proc - np.outer(gain, gain))
        p = 0.5 * (p + p.T)

        if not (np.isfinite(x).all() and np.isfinite(p).all()):
            raise InstabilityError(f"estimate diverged at step {k + 1}; try a smaller dt")
        if not _psd_shifted(p, abort_tol):
            raise InstabilityError(
                f"covariance lost positive semidefiniteness at step {k + 1}; try a smaller dt"
            )
        if not _psd_shifted(p, health_tol):
            health += 1
        xs[k + 1] = x

    return xs, p, health
