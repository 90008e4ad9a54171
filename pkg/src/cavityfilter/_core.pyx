# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled stepping kernels. Mirrors _core_py.py operation for operation."""

import numpy as np

cimport numpy as cnp
from libc.math cimport isfinite, sqrt
from scipy.linalg.cython_lapack cimport dpotrf, zheev

from .errors import InstabilityError

cnp.import_array()

BACKEND_KIND = "compiled"


cdef void _matmul(int d, double complex* a, double complex* b, double complex* c) noexcept:
    # c = a @ b, row-major
    cdef int i, j, k
    cdef double complex s
    for i in range(d):
        for j in range(d):
            s = 0
            for k in range(d):
                s = s + a[i * d + k] * b[k * d + j]
            c[i * d + j] = s


cdef double _trace_real(int d, double complex* a) noexcept:
    cdef int i
    cdef double s = 0.0
    for i in range(d):
        s = s + a[i * d + i].real
    return s


cdef void _hermitize(int d, double complex* a) noexcept:
    # a <- (a + a^H)/2, exactly Hermitian afterwards
    cdef int i, j
    cdef double complex v
    for i in range(d):
        a[i * d + i] = 0.5 * (a[i * d + i] + a[i * d + i].conjugate())
        for j in range(i + 1, d):
            v = 0.5 * (a[i * d + j] + a[j * d + i].conjugate())
            a[i * d + j] = v
            a[j * d + i] = v.conjugate()


cdef void _record(int d, int n_obs, int k, int npts, double complex* rho,
                  double complex* pobs, double* obs_out, double* diag,
                  double min_eig, double complex* pstates, bint keep_states) noexcept:
    cdef int ob, i, j
    cdef double s, purity, herm, dre, dimg, tr
    for ob in range(n_obs):
        s = 0.0
        for i in range(d):
            for j in range(d):
                s = s + (pobs[ob * d * d + i * d + j] * rho[j * d + i]).real
        obs_out[ob * npts + k] = s
    purity = 0.0
    herm = 0.0
    tr = 0.0
    for i in range(d):
        tr = tr + rho[i * d + i].real
        for j in range(d):
            dre = rho[i * d + j].real - rho[j * d + i].real
            dimg = rho[i * d + j].imag + rho[j * d + i].imag
            s = sqrt(dre * dre + dimg * dimg)
            if s > herm:
                herm = s
            purity = purity + rho[i * d + j].real * rho[i * d + j].real \
                + rho[i * d + j].imag * rho[i * d + j].imag
    diag[0 * npts + k] = min_eig
    diag[1 * npts + k] = purity
    if tr >= 1.0:
        diag[2 * npts + k] = tr - 1.0
    else:
        diag[2 * npts + k] = 1.0 - tr
    diag[3 * npts + k] = herm
    if keep_states:
        for i in range(d * d):
            pstates[k * d * d + i] = rho[i]


def sme_run(rho0, h, l0, l1, noise, double dt, bint generate, obs,
            double clip_trigger, double abort_tol, bint keep_states):
    """Compiled twin of _core_py.sme_run; same contract."""
    cdef cnp.ndarray[cnp.complex128_t, ndim=2] rho_a = np.array(rho0, dtype=np.complex128, order="C")
    cdef cnp.ndarray[cnp.complex128_t, ndim=2] h_a = np.ascontiguousarray(h, dtype=np.complex128)
    cdef cnp.ndarray[cnp.complex128_t, ndim=2] l0_a = np.ascontiguousarray(l0, dtype=np.complex128)
    cdef cnp.ndarray[cnp.complex128_t, ndim=2] l1_a = np.ascontiguousarray(l1, dtype=np.complex128)
    cdef cnp.ndarray[cnp.complex128_t, ndim=2] l0d_a = np.ascontiguousarray(l0_a.conj().T)
    cdef cnp.ndarray[cnp.complex128_t, ndim=2] l1d_a = np.ascontiguousarray(l1_a.conj().T)
    cdef cnp.ndarray[cnp.complex128_t, ndim=2] n0_a = np.ascontiguousarray(l0d_a @ l0_a)
    cdef cnp.ndarray[cnp.complex128_t, ndim=2] n1_a = np.ascontiguousarray(l1d_a @ l1_a)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] noise_a = np.ascontiguousarray(noise, dtype=np.float64)
    cdef cnp.ndarray[cnp.complex128_t, ndim=3] obs_a = np.ascontiguousarray(obs, dtype=np.complex128)

    cdef int d = rho_a.shape[0]
    cdef int n_steps = noise_a.shape[0]
    cdef int n_obs = obs_a.shape[0]
    cdef int npts = n_steps + 1

    cdef cnp.ndarray[cnp.float64_t, ndim=2] obs_out = np.empty((n_obs, npts))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dy_out = np.empty(n_steps)
    cdef cnp.ndarray[cnp.complex128_t, ndim=3] states = np.empty(
        (npts if keep_states else 1, d, d), dtype=np.complex128)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] diag = np.empty((4, npts))

    cdef cnp.ndarray[cnp.complex128_t, ndim=2] sa = np.empty((d, d), dtype=np.complex128)
    cdef cnp.ndarray[cnp.complex128_t, ndim=2] sb0 = np.empty((d, d), dtype=np.complex128)
    cdef cnp.ndarray[cnp.complex128_t, ndim=2] sb1 = np.empty((d, d), dtype=np.complex128)
    cdef cnp.ndarray[cnp.complex128_t, ndim=2] sd0 = np.empty((d, d), dtype=np.complex128)
    cdef cnp.ndarray[cnp.complex128_t, ndim=2] sd1 = np.empty((d, d), dtype=np.complex128)
    cdef cnp.ndarray[cnp.complex128_t, ndim=2] sc0 = np.empty((d, d), dtype=np.complex128)
    cdef cnp.ndarray[cnp.complex128_t, ndim=2] sc1 = np.empty((d, d), dtype=np.complex128)
    cdef cnp.ndarray[cnp.complex128_t, ndim=2] snew = np.empty((d, d), dtype=np.complex128)
    cdef cnp.ndarray[cnp.complex128_t, ndim=1] eigbuf = np.empty(d * d, dtype=np.complex128)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] w = np.empty(d)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] rwork = np.empty(3 * d - 2 if d > 1 else 1)

    cdef double complex* rho = <double complex*> rho_a.data
    cdef double complex* hm = <double complex*> h_a.data
    cdef double complex* pl0 = <double complex*> l0_a.data
    cdef double complex* pl1 = <double complex*> l1_a.data
    cdef double complex* pl0d = <double complex*> l0d_a.data
    cdef double complex* pl1d = <double complex*> l1d_a.data
    cdef double complex* pn0 = <double complex*> n0_a.data
    cdef double complex* pn1 = <double complex*> n1_a.data
    cdef double complex* pa = <double complex*> sa.data
    cdef double complex* pb0 = <double complex*> sb0.data
    cdef double complex* pb1 = <double complex*> sb1.data
    cdef double complex* pd0 = <double complex*> sd0.data
    cdef double complex* pd1 = <double complex*> sd1.data
    cdef double complex* pc0 = <double complex*> sc0.data
    cdef double complex* pc1 = <double complex*> sc1.data
    cdef double complex* pnew = <double complex*> snew.data
    cdef double complex* peig = <double complex*> eigbuf.data
    cdef double complex* pobs = <double complex*> obs_a.data
    cdef double complex* pstates = <double complex*> states.data
    cdef double* pobs_out = <double*> obs_out.data
    cdef double* pdiag = <double*> diag.data
    cdef double* pw = <double*> w.data
    cdef double* prwork = <double*> rwork.data

    cdef int info = 0
    cdef int lwork = -1
    cdef double complex wkopt
    cdef char jobz_v = b'V'
    cdef char jobz_n = b'N'
    cdef char uplo = b'L'
    zheev(&jobz_v, &uplo, &d, peig, &d, pw, &wkopt, &lwork, prwork, &info)
    lwork = <int> wkopt.real
    if lwork < 2 * d - 1:
        lwork = 2 * d - 1
    cdef cnp.ndarray[cnp.complex128_t, ndim=1] work = np.empty(lwork, dtype=np.complex128)
    cdef double complex* pwork = <double complex*> work.data

    cdef int k, i, j, kk
    cdef double m, dy, scale, tr, min_eig
    cdef double complex v, drift

    _hermitize(d, rho)
    tr = _trace_real(d, rho)
    if not isfinite(tr) or tr <= 1e-12:
        raise InstabilityError(f"initial state trace {tr} is not usable")
    for i in range(d * d):
        rho[i] = rho[i] / tr

    for i in range(d * d):
        peig[i] = rho[i]
    zheev(&jobz_n, &uplo, &d, peig, &d, pw, pwork, &lwork, prwork, &info)
    if info != 0:
        raise InstabilityError("eigendecomposition of the initial state failed")
    min_eig = w[0]

    _record(d, n_obs, 0, npts, rho, pobs, pobs_out, pdiag, min_eig, pstates, keep_states)

    for k in range(n_steps):
        _matmul(d, pl0, rho, pb0)
        m = 2.0 * _trace_real(d, pb0)
        if generate:
            dy = m * dt + noise_a[k]
        else:
            dy = noise_a[k]
        dy_out[k] = dy
        scale = dy - m * dt

        _matmul(d, hm, rho, pa)
        _matmul(d, pl1, rho, pb1)
        _matmul(d, pn0, rho, pd0)
        _matmul(d, pn1, rho, pd1)
        _matmul(d, pb0, pl0d, pc0)
        _matmul(d, pb1, pl1d, pc1)

        for i in range(d):
            for j in range(d):
                v = pa[i * d + j] - pa[j * d + i].conjugate()
                drift = -1j * v
                drift = drift + pc0[i * d + j]
                drift = drift - 0.5 * (pd0[i * d + j] + pd0[j * d + i].conjugate())
                drift = drift + pc1[i * d + j]
                drift = drift - 0.5 * (pd1[i * d + j] + pd1[j * d + i].conjugate())
                pnew[i * d + j] = (
                    rho[i * d + j]
                    + drift * dt
                    + (pb0[i * d + j] + pb0[j * d + i].conjugate() - m * rho[i * d + j]) * scale
                )

        _hermitize(d, pnew)
        tr = _trace_real(d, pnew)
        if not isfinite(tr) or tr <= 1e-12:
            raise InstabilityError(
                f"state trace collapsed at step {k + 1} (trace {tr}); try a smaller dt")
        for i in range(d * d):
            rho[i] = pnew[i] / tr

        for i in range(d * d):
            peig[i] = rho[i]
        zheev(&jobz_v, &uplo, &d, peig, &d, pw, pwork, &lwork, prwork, &info)
        if info != 0:
            raise InstabilityError(
                f"eigendecomposition failed at step {k + 1}; try a smaller dt")
        min_eig = w[0]
        if min_eig < clip_trigger:
            # clip negative eigenvalues, rebuild, renormalize; the buffer holds
            # eigenvectors of conj(rho) column-major, so rho's are their conjugates
            for i in range(d):
                if w[i] < 0.0:
                    w[i] = 0.0
            for i in range(d):
                for j in range(d):
                    v = 0
                    for kk in range(d):
                        v = v + peig[kk * d + i].conjugate() * w[kk] * peig[kk * d + j]
                    pnew[i * d + j] = v
            _hermitize(d, pnew)
            tr = _trace_real(d, pnew)
            for i in range(d * d):
                rho[i] = pnew[i] / tr
            for i in range(d * d):
                peig[i] = rho[i]
            zheev(&jobz_n, &uplo, &d, peig, &d, pw, pwork, &lwork, prwork, &info)
            if info != 0:
                raise InstabilityError(
                    f"eigendecomposition failed at step {k + 1}; try a smaller dt")
            min_eig = w[0]
        if not isfinite(min_eig) or min_eig < abort_tol:
            raise InstabilityError(
                f"state positivity lost at step {k + 1} (min eigenvalue {min_eig:.3e}); "
                "try a smaller dt")

        _record(d, n_obs, k + 1, npts, rho, pobs, pobs_out, pdiag, min_eig, pstates, keep_states)

    if not keep_states:
        for i in range(d * d):
            pstates[i] = rho[i]
    return obs_out, dy_out, states, diag


cdef bint _psd_shifted4(double* p, double shift) noexcept:
    # Cholesky feasibility of p + shift*I for a symmetric 4x4
    cdef double buf[16]
    cdef int i
    cdef int info = 0
    cdef int n = 4
    cdef char uplo = b'L'
    for i in range(16):
        buf[i] = p[i]
    for i in range(4):
        buf[i * 4 + i] = buf[i * 4 + i] + shift
    dpotrf(&uplo, &n, buf, &n, &info)
    return info == 0


def qekf_run(x0, p0, dy, double dt, double k1, double k2, double alpha,
             double abort_tol, double health_tol):
    """Compiled twin of _core_py.qekf_run; same contract."""
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dy_a = np.ascontiguousarray(dy, dtype=np.float64)
    cdef int n_steps = dy_a.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] xs = np.empty((n_steps + 1, 4))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] p_a = np.array(p0, dtype=np.float64, order="C")
    cdef cnp.ndarray[cnp.float64_t, ndim=1] x_a = np.asarray(x0, dtype=np.float64).copy()

    cdef double x[4]
    cdef double p[16]
    cdef double f[4]
    cdef double jac[16]
    cdef double gain[4]
    cdef double fp[16]
    cdef double pf[16]
    cdef double pn[16]
    cdef double q_proc[16]
    cdef double x_new[4]
    cdef double c0, h_pred, v
    cdef int k, i, j, kk
    cdef int health = 0
    cdef bint ok

    for i in range(4):
        x[i] = x_a[i]
    for i in range(4):
        for j in range(4):
            p[i * 4 + j] = 0.5 * (p_a[i, j] + p_a[j, i])
    for i in range(16):
        q_proc[i] = 0.0
    q_proc[0] = k1 / 4.0
    q_proc[5] = k1 / 4.0
    q_proc[10] = k2 / 4.0
    q_proc[15] = k2 / 4.0
    c0 = 2.0 * sqrt(k1)

    for i in range(4):
        xs[0, i] = x[i]

    for k in range(n_steps):
        for i in range(4):
            gain[i] = c0 * p[i * 4 + 0]
        h_pred = c0 * x[0]

        f[0] = -0.5 * k1 * x[0] + x[1] * x[2] / alpha
        f[1] = -0.5 * k1 * x[1] - x[0] * x[2] / alpha
        f[2] = -0.5 * k2 * x[2]
        f[3] = (-0.5 * k2 * x[3] - x[0] * x[0] / (2.0 * alpha)
                - x[1] * x[1] / (2.0 * alpha) - 1.0 / (4.0 * alpha))

        jac[0] = -0.5 * k1
        jac[1] = x[2] / alpha
        jac[2] = x[1] / alpha
        jac[3] = 0.0
        jac[4] = -x[2] / alpha
        jac[5] = -0.5 * k1
        jac[6] = -x[0] / alpha
        jac[7] = 0.0
        jac[8] = 0.0
        jac[9] = 0.0
        jac[10] = -0.5 * k2
        jac[11] = 0.0
        jac[12] = -x[0] / alpha
        jac[13] = -x[1] / alpha
        jac[14] = 0.0
        jac[15] = -0.5 * k2

        for i in range(4):
            x_new[i] = x[i] + (f[i] - gain[i] * h_pred) * dt + gain[i] * dy_a[k]
        for i in range(4):
            x[i] = x_new[i]

        for i in range(4):
            for j in range(4):
                v = 0.0
                for kk in range(4):
                    v = v + jac[i * 4 + kk] * p[kk * 4 + j]
                fp[i * 4 + j] = v
        for i in range(4):
            for j in range(4):
                v = 0.0
                for kk in range(4):
                    v = v + p[i * 4 + kk] * jac[j * 4 + kk]
                pf[i * 4 + j] = v
        for i in range(4):
            for j in range(4):
                pn[i * 4 + j] = p[i * 4 + j] + dt * (
                    fp[i * 4 + j] + pf[i * 4 + j] + q_proc[i * 4 + j] - gain[i] * gain[j])
        for i in range(4):
            for j in range(i, 4):
                v = 0.5 * (pn[i * 4 + j] + pn[j * 4 + i])
                p[i * 4 + j] = v
                p[j * 4 + i] = v

        ok = True
        for i in range(4):
            if not isfinite(x[i]):
                ok = False
        for i in range(16):
            if not isfinite(p[i]):
                ok = False
        if not ok:
            raise InstabilityError(f"estimate diverged at step {k + 1}; try a smaller dt")
        if not _psd_shifted4(p, abort_tol):
            raise InstabilityError(
                f"covariance lost positive semidefiniteness at step {k + 1}; try a smaller dt")
        if not _psd_shifted4(p, health_tol):
            health = health + 1
        for i in range(4):
            xs[k + 1, i] = x[i]

    p_out = np.empty((4, 4))
    for i in range(4):
        for j in range(4):
            p_out[i, j] = p[i * 4 + j]
    return xs, p_out, health
