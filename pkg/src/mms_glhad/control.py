"""Finite-horizon LQG synthesis: regulator, reference feedforward and Kalman gains.

Index convention: ``S_k`` is the cost-to-go matrix acting on the stage-k
output ``x_k`` (so ``S_K = F``), and stage k's regulator uses ``S_k``::

    M_k   = B_k' S_k B_k + Z
    L_k   = -M_k^{-1} B_k' S_k A_k        (u_k = L_k xhat_{k-1} + LR_k r_k)
    LR_k  =  M_k^{-1} B_k' S_k
    S_{k-1} = A_k' (S_k - S_k B_k M_k^{-1} B_k' S_k) A_k + U
"""
from __future__ import annotations

import numpy as np
from scipy import linalg

from .model import Gains, NumericalError, SystemModel


class SynthesisError(NumericalError):
    pass


def _sym(M):
    return 0.5 * (M + M.T)


def _spd_solve(M, rhs, what, k):
    # M is symmetric (PSD + PSD); Cholesky fails fast when it is singular
    try:
        cf = linalg.cho_factor(M, check_finite=True)
    except linalg.LinAlgError:
        raise SynthesisError(f"stage {k}: {what} is singular") from None
    if np.min(np.abs(np.diag(cf[0]))) ** 2 < 1e-14 * max(1.0, np.abs(M).max()):
        raise SynthesisError(f"stage {k}: {what} is singular")
    return linalg.cho_solve(cf, rhs)


def riccati_backward(system: SystemModel) -> list:
    """Return ``[(S_k, L_k) for k = 1..K]``."""
    K = system.K
    out = [None] * K
    S = _sym(np.asarray(system.F, dtype=float))
    for k in range(K, 0, -1):
        st = system.stages[k]
        A, B = st.A, st.B
        M = _sym(B.T @ S @ B + system.Z)
        L = -_spd_solve(M, B.T @ S @ A, "B'SB + Z", k)
        out[k - 1] = (S, L)
        if k > 1:
            SB = S @ B
            S = _sym(A.T @ (S - SB @ _spd_solve(M, SB.T, "B'SB + Z", k)) @ A + system.U)
    return out


def reference_gain(system: SystemModel, riccati=None) -> list:
    """Feedforward gains ``LR_k = (B'S_kB + Z)^{-1} B'S_k`` for k = 1..K."""
    riccati = riccati_backward(system) if riccati is None else riccati
    out = []
    for k, (S, _) in enumerate(riccati, start=1):
        B = system.stages[k].B
        M = _sym(B.T @ S @ B + system.Z)
        out.append(_spd_solve(M, B.T @ S, "B'SB + Z", k))
    return out


def kalman_covariances(system: SystemModel) -> list:
    """Run the covariance recursion; returns ``[(K_k, P_pred_k, P_filt_k)]`` for k = 0..K."""
    out = []
    P_pred = _sym(np.asarray(system.prior_cov, dtype=float))
    for k, st in enumerate(system.stages):
        if k > 0:
            P_pred = _sym(st.A @ P_filt @ st.A.T + st.W)
        C = st.C
        Sinn = _sym(C @ P_pred @ C.T + st.V)
        Kk = _spd_solve(Sinn, C @ P_pred, "innovation covariance", k).T
        P_filt = _sym((np.eye(st.m) - Kk @ C) @ P_pred)
        out.append((Kk, P_pred, P_filt))
    return out


def kalman_gains(system: SystemModel) -> list:
    return [K for K, _, _ in kalman_covariances(system)]


def synthesize(system: SystemModel) -> SystemModel:
    """Return a copy of ``system`` carrying L_k, LR_k and K_k."""
    ric = riccati_backward(system)
    gains = Gains(
        L=tuple(L for _, L in ric),
        LR=tuple(reference_gain(system, ric)),
        K=tuple(kalman_gains(system)),
    )
    return system.with_gains(gains)


def require_gains(system: SystemModel) -> Gains:
    if system.gains is None:
        raise SynthesisError("gains not synthesized; call control.synthesize first")
    return system.gains
