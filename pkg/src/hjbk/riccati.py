"""Continuous-time algebraic Riccati equation ``A'P + PA - P B D^{-1} B' P + Q = 0``."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.linalg

from .errors import InputError, SynthesisError


class RiccatiMethod(str, Enum):
    SCALAR_CLOSED_FORM = "scalar_closed_form"
    HAMILTONIAN_SUBSPACE = "hamiltonian_subspace"


@dataclass(frozen=True)
class RiccatiSolution:
    P: np.ndarray
    residual_norm: float
    method: RiccatiMethod

    def closed_loop_matrix(self, lin, D):
        D = np.atleast_2d(D)
        return lin.A - lin.B @ np.linalg.solve(D, lin.B.T @ self.P)


def scalar_closed_form(A, B, D, Q):
    """Positive root of ``2AP - P^2 B^2 / D + Q = 0``."""
    if B == 0:
        raise InputError("B = 0: the scalar equation is linear, use the Lyapunov solution instead")
    if not D > 0:
        raise InputError("D must be positive")
    if Q < 0:
        raise InputError("Q must be nonnegative")
    ratio = A * D / B**2
    return ratio + math.sqrt(ratio**2 + Q * D / B**2)


def are_residual(P, lin, D):
    """Frobenius norm of the Riccati left-hand side at ``P``."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    D = np.atleast_2d(np.asarray(D, dtype=float))
    A, B, Q = lin.A, lin.B, lin.Q
    if P.shape != A.shape:
        raise InputError(f"P has shape {P.shape}, expected {A.shape}")
    R = A.T @ P + P @ A - P @ B @ np.linalg.solve(D, B.T @ P) + Q
    return float(np.linalg.norm(R, "fro"))


def _real_stable_basis(H, n):
    w, V = scipy.linalg.eig(H)
    scale = max(1.0, np.abs(w).max())
    if np.any(np.abs(w.real) <= 1e-10 * scale):
        raise SynthesisError("Hamiltonian has eigenvalues on the imaginary axis; (A, B) is not stabilizable "
                             "or (A, Q) is not detectable")
    stable = np.where(w.real < 0)[0]
    if len(stable) != n:
        raise SynthesisError(f"expected {n} stable Hamiltonian eigenvalues, found {len(stable)}")
    cols = []
    used = set()
    for idx in stable:
        if idx in used:
            continue
        lam = w[idx]
        if abs(lam.imag) <= 1e-12 * scale:
            cols.append(V[:, idx].real)
            used.add(idx)
            continue
        # complex pair: replace (v, conj v) by (Re v, Im v)
        partner = min(
            (j for j in stable if j not in used and j != idx),
            key=lambda j: abs(w[j] - np.conj(lam)),
        )
        cols.append(V[:, idx].real)
        cols.append(V[:, idx].imag)
        used.update((idx, partner))
    return np.column_stack(cols)


def _schur_stable_basis(H, n):
    T, Z, sdim = scipy.linalg.schur(H, output="real", sort="lhp")
    if sdim != n:
        raise SynthesisError(f"expected {n} stable Hamiltonian eigenvalues, found {sdim}")
    return Z[:, :n]


def solve_are(lin, D, method=None):
    """Stabilizing solution of the Riccati equation for a linearization.

    Scalar single-input problems use the closed form unless ``method`` asks
    for the Hamiltonian path.  Otherwise ``P`` is recovered from the stable
    invariant subspace of the Hamiltonian ``[[A, -B D^{-1} B'], [-Q, -A']]``
    as ``X2 X1^{-1}`` and then symmetrized.
    When the eigenvector basis is ill-conditioned (defective Hamiltonian) an
    ordered real Schur basis spanning the same subspace is used instead.
    """
    A = np.atleast_2d(np.asarray(lin.A, dtype=float))
    B = np.asarray(lin.B, dtype=float).reshape(A.shape[0], -1)
    Q = np.atleast_2d(np.asarray(lin.Q, dtype=float))
    D = np.atleast_2d(np.asarray(D, dtype=float))
    n = A.shape[0]
    if D.shape != (B.shape[1], B.shape[1]):
        raise InputError(f"D must be {B.shape[1]}x{B.shape[1]}")
    if np.linalg.eigvalsh(0.5 * (D + D.T)).min() <= 0:
        raise InputError("D must be positive definite")
    if np.linalg.eigvalsh(0.5 * (Q + Q.T)).min() < -1e-8:
        raise InputError("Q must be positive semidefinite")

    method = None if method is None else RiccatiMethod(method)
    scalar = n == 1 and B.shape[1] == 1 and B[0, 0] != 0
    if method is RiccatiMethod.SCALAR_CLOSED_FORM and not scalar:
        raise InputError("the closed form needs a scalar problem with B != 0")
    if scalar and method is not RiccatiMethod.HAMILTONIAN_SUBSPACE:
        P = np.array([[scalar_closed_form(A[0, 0], B[0, 0], D[0, 0], Q[0, 0])]])
        method = RiccatiMethod.SCALAR_CLOSED_FORM
    else:
        S = B @ np.linalg.solve(D, B.T)
        H = np.block([[A, -S], [-Q, -A.T]])
        basis = _real_stable_basis(H, n)
        X1, X2 = basis[:n], basis[n:]
        if np.linalg.cond(X1) > 1e10:
            basis = _schur_stable_basis(H, n)
            X1, X2 = basis[:n], basis[n:]
            if np.linalg.cond(X1) > 1e12:
                raise SynthesisError("stable subspace is not a graph over the state coordinates")
        P = np.linalg.solve(X1.T, X2.T).T
        method = RiccatiMethod.HAMILTONIAN_SUBSPACE
    P = 0.5 * (P + P.T)

    res = are_residual(P, lin, D)
    if not res < 1e-8 * (1.0 + np.linalg.norm(P, "fro")):
        raise SynthesisError(f"Riccati residual recheck failed ({res:.3e})", {"residual": res})
    if np.linalg.eigvalsh(P).min() <= 0:
        raise SynthesisError("Riccati solution is not positive definite", {"P": P.tolist()})
    return RiccatiSolution(P=P, residual_norm=res, method=method)
