"""Combined model of a monitored cavity coupled to a disturbance cavity.

A classical mean-reverting disturbance dq = -u q dt - v dw acting on a damped
cavity is represented by a second cavity mode: with alpha = sqrt(2u)/(2v) and
k2 = 2u, the slow quadrature of the auxiliary mode reproduces the disturbance
statistics through q ~ Q2/alpha (at the level of first moments, which is the
only sense the estimators use). The combined system couples to two channels,
of which only channel 0 (the damped cavity's output) is measured.
"""

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import DimensionError
from .operators import Operator, SpaceLayout, embed, fock_annihilation, quadrature_pair


@dataclass(frozen=True)
class OuParams:
    """Mean-reverting disturbance parameters for dq = -u q dt - v dw.

    u must be positive (the cavity analog requires a positive coupling);
    q0 is the initial value.
    """

    u: float
    v: float
    q0: float

    def __post_init__(self):
        if not self.u > 0:
            raise ValueError(f"decay rate u must be positive, got {self.u}")


@dataclass(frozen=True)
class AnalogMapping:
    """Scaling between the classical disturbance and the auxiliary cavity.

    alpha relates q to the Q2 quadrature (q ~ Q2/alpha); k2 is the auxiliary
    cavity's coupling strength. Satisfies k2 = 4 (alpha v)^2 by construction.
    """

    alpha: float
    k2: float


class QuadratureIndex(IntEnum):
    """Component order of the quadrature vector x = (Q1, P1, Q2, P2)."""

    Q1 = 0
    P1 = 1
    Q2 = 2
    P2 = 3


@dataclass(frozen=True)
class CombinedModel:
    """The (S, L, H) description of the two-cavity system plus derived constants.

    Fields
    ------
    layout : SpaceLayout
        Two-subsystem truncation, measured cavity first.
    H : Operator
        Hamiltonian Q2 a'a / alpha on the product space.
    L : tuple of Operator
        Coupling channels (sqrt(k1) a, sqrt(k2) b); channel 0 is measured.
    S : ndarray
        Scattering matrix, identity here.
    k1 : float
        Measured cavity coupling.
    mapping : AnalogMapping
    C : ndarray
        Measurement row (2 sqrt(k1), 0, 0, 0) acting on quadrature vectors.
    Gq : ndarray
        Quadrature diffusion covariance diag(k1/4, k1/4, k2/4, k2/4).
    """

    layout: SpaceLayout
    H: Operator
    L: tuple
    S: np.ndarray
    k1: float
    mapping: AnalogMapping
    C: np.ndarray
    Gq: np.ndarray


def map_classical_to_cavity(p):
    """Map disturbance parameters onto the auxiliary cavity.

    alpha = sqrt(2u)/(2v) (positive branch), k2 = 2u. The identity
    k2 = 4 (alpha v)^2 then holds to rounding.
    """
    if not p.u > 0:
        raise ValueError(f"decay rate u must be positive, got {p.u}")
    if p.v == 0:
        raise ValueError("diffusion gain v must be nonzero, the mapping is singular at 0")
    alpha = np.sqrt(2.0 * p.u) / (2.0 * p.v)
    return AnalogMapping(alpha=float(alpha), k2=2.0 * p.u)


def build_combined_model(k1, mapping, layout):
    """Assemble the combined two-cavity model.

    The Hamiltonian is Q2 a'a / alpha (factors live on different subsystems
    and commute, so the product order is immaterial); the coupling channels
    are sqrt(k1) a on the measured cavity and sqrt(k2) b on the auxiliary one.
    """
    if not k1 > 0:
        raise ValueError(f"coupling k1 must be positive, got {k1}")
    if len(layout.dims) != 2:
        raise DimensionError(f"layout must have exactly 2 subsystems, got {len(layout.dims)}")
    n1, n2 = layout.dims

    a = fock_annihilation(n1)
    b = fock_annihilation(n2)
    num_a = Operator(n1, a.entries.conj().T @ a.entries, hermitian=True)
    q2, _ = quadrature_pair(n2)

    h_entries = embed(q2, 1, layout).entries @ embed(num_a, 0, layout).entries / mapping.alpha
    H = Operator(layout.total_dim, h_entries, hermitian=True)

    L0 = Operator(layout.total_dim, np.sqrt(k1) * embed(a, 0, layout).entries)
    L1 = Operator(layout.total_dim, np.sqrt(mapping.k2) * embed(b, 1, layout).entries)

    C = np.array([2.0 * np.sqrt(k1), 0.0, 0.0, 0.0])
    Gq = np.diag([k1 / 4.0, k1 / 4.0, mapping.k2 / 4.0, mapping.k2 / 4.0])

    return CombinedModel(
        layout=layout,
        H=H,
        L=(L0, L1),
        S=np.eye(2, dtype=np.complex128),
        k1=float(k1),
        mapping=mapping,
        C=C,
        Gq=Gq,
    )


def quadrature_ops(layout):
    """Embedded quadrature Operators (Q1, P1, Q2, P2) on the product space."""
    if len(layout.dims) != 2:
        raise DimensionError(f"layout must have exactly 2 subsystems, got {len(layout.dims)}")
    q1, p1 = quadrature_pair(layout.dims[0])
    q2, p2 = quadrature_pair(layout.dims[1])
    return (
        embed(q1, 0, layout),
        embed(p1, 0, layout),
        embed(q2, 1, layout),
        embed(p2, 1, layout),
    )


def lindblad_drift(model, rho):
    """Deterministic part of the state evolution.

    Returns -i[H, rho] + sum_j (L_j rho L_j' - (L_j'L_j rho + rho L_j'L_j)/2)
    over both channels. Trace-free and Hermitian (within rounding) for
    Hermitian input.
    """
    r = getattr(rho, "rho", rho)
    r = np.asarray(r, dtype=np.complex128)
    d = model.layout.total_dim
    if r.shape != (d, d):
        raise DimensionError(f"state shape {r.shape} does not match model dim {d}")
    h = model.H.entries
    out = -1j * (h @ r - r @ h)
    for Lop in model.L:
        l = Lop.entries
        ld = l.conj().T
        n = ld @ l
        out = out + l @ r @ ld - 0.5 * (n @ r + r @ n)
    return out
