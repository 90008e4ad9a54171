"""Dense operator algebra on truncated oscillator spaces.

Everything here is a plain complex matrix with dimension metadata. Dimensions
stay small (a handful of levels per mode), so no sparse or symbolic path is
provided. All values are immutable after construction and safe to share
between concurrent workers.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError

HERMITIAN_TOL = 1e-12


@dataclass(frozen=True)
class SpaceLayout:
    """Ordered truncation dimensions of the subsystems of a tensor product.

    Parameters
    ----------
    dims : sequence of int
        Per-subsystem Hilbert dimensions, each at least 2.
    """

    dims: tuple

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) == 0:
            raise DimensionError("layout needs at least one subsystem")
        for d in dims:
            if d < 2:
                raise DimensionError(f"subsystem dimension {d} < 2")
        object.__setattr__(self, "dims", dims)

    @property
    def total_dim(self):
        return int(np.prod(self.dims))


@dataclass(frozen=True)
class Operator:
    """A dense complex matrix on a truncated space.

    Parameters
    ----------
    dim : int
        Hilbert dimension; must equal both sides of ``entries``.
    entries : ndarray
        dim x dim complex matrix. Copied and frozen on construction.
    hermitian : bool
        If True, construction verifies max|entries - entries^H| < 1e-12.
    """

    dim: int
    entries: np.ndarray
    hermitian: bool = field(default=False)

    def __post_init__(self):
        entries = np.array(self.entries, dtype=np.complex128)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise DimensionError(f"entries must be square, got shape {entries.shape}")
        if entries.shape[0] != self.dim:
            raise DimensionError(
                f"dim {self.dim} does not match entries side {entries.shape[0]}"
            )
        if self.hermitian:
            defect = np.abs(entries - entries.conj().T).max()
            if defect >= HERMITIAN_TOL:
                raise DimensionError(
                    f"operator flagged Hermitian but max|E - E^H| = {defect:.3e}"
                )
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)

    def dagger(self):
        """Adjoint as a new Operator."""
        return Operator(self.dim, self.entries.conj().T, hermitian=self.hermitian)


def identity(dim):
    """Identity Operator on a dim-level space."""
    return Operator(dim, np.eye(dim, dtype=np.complex128), hermitian=True)


def fock_annihilation(n):
    """Lowering operator on an n-level truncation.

    Returns the n x n matrix with sqrt(k) on the superdiagonal, the standard
    realization of a bosonic annihilation operator restricted to the lowest
    n number states.
    """
    if n < 2:
        raise DimensionError(f"truncation dimension {n} < 2")
    a = np.diag(np.sqrt(np.arange(1, n, dtype=np.float64)), k=1)
    return Operator(n, a.astype(np.complex128))


def quadrature_pair(n):
    """Quadratures Q = (a + a^H)/2 and P = (a - a^H)/(2i) on an n-level space."""
    a = fock_annihilation(n).entries
    ad = a.conj().T
    q = Operator(n, (a + ad) / 2.0, hermitian=True)
    p = Operator(n, (a - ad) / 2.0j, hermitian=True)
    return q, p


def embed(op, slot, layout):
    """Tensor an operator with identities on all other subsystems.

    Parameters
    ----------
    op : Operator
        Operator on the subsystem at position ``slot``.
    slot : int
        Index into ``layout.dims``.
    layout : SpaceLayout

    Returns
    -------
    Operator on the full product space, with the Hermitian flag preserved.
    """
    if slot < 0 or slot >= len(layout.dims):
        raise DimensionError(f"slot {slot} out of range for {len(layout.dims)} subsystems")
    if op.dim != layout.dims[slot]:
        raise DimensionError(
            f"operator dim {op.dim} does not match layout dim {layout.dims[slot]} at slot {slot}"
        )
    out = np.ones((1, 1), dtype=np.complex128)
    for k, d in enumerate(layout.dims):
        factor = op.entries if k == slot else np.eye(d, dtype=np.complex128)
        out = np.kron(out, factor)
    return Operator(layout.total_dim, out, hermitian=op.hermitian)


def expectation(rho, x):
    """Tr(rho X) for a density matrix and an Operator.

    ``rho`` may be a DensityState or a bare matrix; its trace must be 1 within
    1e-6 (a loose sanity screen, the tight per-step tolerance lives in the
    filter). Returns a complex scalar; for Hermitian X on a valid state the
    imaginary part is below 1e-10.
    """
    r = getattr(rho, "rho", rho)
    r = np.asarray(r)
    if r.shape != (x.dim, x.dim):
        raise DimensionError(f"state shape {r.shape} does not match operator dim {x.dim}")
    tr = np.trace(r)
    if abs(tr - 1.0) > 1e-6:
        raise DimensionError(f"state trace {tr} is not 1")
    return complex(np.trace(r @ x.entries))
