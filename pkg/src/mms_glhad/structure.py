"""Augmented structure matrices and residual geometry.

``y = H xt + H1 delta + Hw w + H1 v`` where ``xt = [x0; r_1; ...; r_K]``.
Two independent constructions are provided: block closed forms built from
the closed-loop factors

    Phi_k = A_k + B_k L_k,   G_k = B_k L_k,   Psi_k = (I - K_k C_k) A_k,

and impulse propagation through the simulated loop (exact by linearity).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .control import require_gains
from .model import NumericalError, SystemModel
from .simulate import propagate

RANK_TOL = 1e-10
EIG_TOL = 1e-10


class GeometryError(NumericalError):
    pass


# --------------------------------------------------------------------------
# closed forms


class _Factors:
    def __init__(self, system: SystemModel):
        g = require_gains(system)
        st = system.stages
        self.system = system
        self.C = [s.C for s in st]
        self.K = list(g.K)
        self.m = [s.m for s in st]
        # index 0 unused for the dynamic factors
        self.Phi = [None] + [st[k].A + st[k].B @ g.L[k - 1] for k in range(1, len(st))]
        self.G = [None] + [st[k].B @ g.L[k - 1] for k in range(1, len(st))]
        self.BLR = [None] + [st[k].B @ g.LR[k - 1] for k in range(1, len(st))]
        self.Psi = [None] + [(np.eye(st[k].m) - g.K[k] @ st[k].C) @ st[k].A for k in range(1, len(st))]
        self.IKC = [np.eye(s.m) - g.K[k] @ s.C for k, s in enumerate(st)]

    def chain(self, mats, a, b):
        """mats[a] @ mats[a-1] @ ... @ mats[b]; identity (size m_a) when a < b."""
        out = np.eye(self.m[a])
        for k in range(a, b - 1, -1):
            out = out @ mats[k]
        return out

    def error_sum(self, i, j, start):
        """sum_{c=start}^{i} Phi_{i:c+1} G_c Psi_{c-1:j+1}"""
        total = np.zeros((self.m[i], self.m[j]))
        for c in range(start, i + 1):
            total += self.chain(self.Phi, i, c + 1) @ self.G[c] @ self.chain(self.Psi, c - 1, j + 1)
        return total

    def state_like(self, i, j):
        """Coefficient in y_i of a unit state perturbation entering at stage j
        whose estimation error is (I - K_j C_j) times it (x0 and w_j)."""
        if i < j:
            return np.zeros((self.C[i].shape[0], self.m[j]))
        if i == j:
            return self.C[i]
        s = self.system.stages[j + 1]
        head = s.A + self.G[j + 1] @ self.K[j] @ self.C[j]
        inner = self.chain(self.Phi, i, j + 2) @ head
        if i >= j + 2:
            inner = inner - self.error_sum(i, j, j + 2) @ self.IKC[j]
        return self.C[i] @ inner


def _assemble(row_dims, col_dims, block):
    rows = []
    for i, n in enumerate(row_dims):
        rows.append(np.hstack([block(i, j) for j in range(len(col_dims))]))
    return np.vstack(rows)


def closed_form_H(system: SystemModel) -> np.ndarray:
    f = _Factors(system)
    n = system.n_dims

    def block(i, j):
        if j == 0:
            return f.state_like(i, 0)
        if i < j:
            return np.zeros((n[i], f.m[j]))
        return f.C[i] @ f.chain(f.Phi, i, j + 1) @ f.BLR[j]

    return _assemble(n, f.m, block)


def closed_form_H1(system: SystemModel) -> np.ndarray:
    f = _Factors(system)
    n = system.n_dims

    def block(i, j):
        if i < j:
            return np.zeros((n[i], n[j]))
        if i == j:
            return np.eye(n[i])
        return f.C[i] @ f.error_sum(i, j, j + 1) @ f.K[j]

    return _assemble(n, n, block)


def closed_form_Hw(system: SystemModel) -> np.ndarray:
    f = _Factors(system)
    n = system.n_dims
    if system.K == 0:
        return np.zeros((system.N, 0))
    return _assemble(n, f.m[1:], lambda i, j: f.state_like(i, j + 1))


# --------------------------------------------------------------------------
# impulse oracle


def _impulse(system, which):
    st = system.stages
    K = system.K
    dims = {"x0": [st[0].m], "refs": [s.m for s in st[1:]],
            "w": [s.m for s in st[1:]], "eta": [s.n for s in st]}[which]
    total = sum(dims)
    if total == 0:
        return np.zeros((system.N, 0))
    E = np.eye(total)
    parts, start = [], 0
    for d in dims:
        parts.append(E[start:start + d])
        start += d

    def zeros(d):
        return np.zeros((d, total))

    x0 = parts[0] if which == "x0" else zeros(st[0].m)
    refs = parts if which == "refs" else [zeros(s.m) for s in st[1:]]
    w = parts if which == "w" else [zeros(s.m) for s in st[1:]]
    eta = parts if which == "eta" else [zeros(s.n) for s in st]
    assert len(refs) == K
    return propagate(system, x0, refs, w, eta).stacked_y()


def oracle_matrices(system: SystemModel):
    """(H, H1, Hw) from unit impulses through the noiseless closed loop."""
    H = np.hstack([_impulse(system, "x0"), _impulse(system, "refs")])
    return H, _impulse(system, "eta"), _impulse(system, "w")


# --------------------------------------------------------------------------
# covariances and residual geometry


def sigma_eps(system: SystemModel, Hw: np.ndarray, H1: np.ndarray) -> np.ndarray:
    Sx = _blockdiag([s.W for s in system.stages[1:]])
    Sy = _blockdiag([s.V for s in system.stages])
    out = Hw @ Sx @ Hw.T + H1 @ Sy @ H1.T
    return 0.5 * (out + out.T)


def _blockdiag(mats):
    if not mats:
        return np.zeros((0, 0))
    r = sum(M.shape[0] for M in mats)
    c = sum(M.shape[1] for M in mats)
    out = np.zeros((r, c))
    i = j = 0
    for M in mats:
        out[i:i + M.shape[0], j:j + M.shape[1]] = M
        i += M.shape[0]
        j += M.shape[1]
    return out


def numerical_rank(M, tol=RANK_TOL) -> int:
    s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > tol * s[0]))


@dataclass
class Geometry:
    """Projection residual geometry for a model matrix ``X`` (H or blockdiag C)."""

    Q: np.ndarray                 # orthonormal basis of col(X)
    proj: np.ndarray
    cov_r: np.ndarray
    eig_vals: np.ndarray          # retained eigenvalues of cov_r
    eig_vecs: np.ndarray          # N x r retained eigenvectors

    def residual(self, y):
        y = np.asarray(y, dtype=float)
        return y - self.Q @ (self.Q.T @ y)

    def fit(self, y, X):
        """Least-squares coefficients (X'X)^{-1} X' y via the orthonormal basis."""
        return np.linalg.lstsq(X, self.Q @ (self.Q.T @ y), rcond=None)[0]


def projection_geometry(X: np.ndarray, cov_y: np.ndarray, what: str = "H") -> Geometry:
    N, M = X.shape
    rank = numerical_rank(X)
    if rank < M:
        raise GeometryError(f"{what} is rank deficient (rank {rank} < {M} columns)")
    if rank >= N:
        raise GeometryError(f"{what} spans all {N} measurements; residual is identically zero")
    Q, _ = np.linalg.qr(X)
    proj = Q @ Q.T
    I_P = np.eye(N) - proj
    cov_r = I_P @ cov_y @ I_P.T
    cov_r = 0.5 * (cov_r + cov_r.T)
    vals, vecs = np.linalg.eigh(cov_r)
    keep = vals > EIG_TOL * max(vals.max(), 0.0)
    if not np.any(keep):
        raise GeometryError(f"residual covariance for {what} is zero; detection impossible")
    return Geometry(Q=Q, proj=proj, cov_r=cov_r, eig_vals=vals[keep], eig_vecs=vecs[:, keep])


def reduce_groups(R: np.ndarray, groups, tol=RANK_TOL):
    """Per-group SVD reduction of the deflated dictionary.

    Each column block of ``R`` is replaced by its left singular vectors with
    singular value above ``tol`` times the largest singular value of R.
    Returns ``(Rp, new_groups)`` with groups as (start, length) pairs; a
    group with no retained direction has length 0.
    """
    smax = np.linalg.norm(R, 2) if R.size else 0.0
    cols, out, start = [], [], 0
    for g0, d in groups:
        block = R[:, g0:g0 + d]
        U, s, _ = np.linalg.svd(block, full_matrices=False)
        keep = s > tol * smax if smax > 0 else np.zeros_like(s, dtype=bool)
        cols.append(U[:, keep])
        out.append((start, int(keep.sum())))
        start += int(keep.sum())
    Rp = np.hstack(cols) if cols else np.zeros((R.shape[0], 0))
    return Rp, out


@dataclass
class StructureMatrices:
    H: np.ndarray
    H1: np.ndarray
    Hw: np.ndarray
    Sigma_eps: np.ndarray
    geometry: Geometry
    R: np.ndarray
    Rp: np.ndarray
    groups: list                  # (start, length) column ranges of Rp per stage
    row_slices: list              # stage blocks of y
    col_blocks: dict = field(default_factory=dict)

    @property
    def proj(self):
        return self.geometry.proj

    @property
    def Cov_r(self):
        return self.geometry.cov_r

    @property
    def eig_r(self):
        return self.geometry.eig_vals, self.geometry.eig_vecs

    def stage_of_groups(self):
        return list(range(len(self.groups)))


def residual_geometry(H, H1, Sigma_eps, stage_dims):
    """Projection, deflated dictionary, per-group reduction and Cov(r)."""
    geom = projection_geometry(H, Sigma_eps, "H")
    R = H1 - geom.Q @ (geom.Q.T @ H1)
    groups, start = [], 0
    for n in stage_dims:
        groups.append((start, n))
        start += n
    Rp, rgroups = reduce_groups(R, groups)
    return geom, R, Rp, rgroups


def build_structures(system: SystemModel, route: str = "oracle") -> StructureMatrices:
    """Assemble all structure matrices; ``route`` picks 'oracle' or 'closed_form'."""
    if route == "oracle":
        H, H1, Hw = oracle_matrices(system)
    elif route == "closed_form":
        H, H1, Hw = closed_form_H(system), closed_form_H1(system), closed_form_Hw(system)
    else:
        raise ValueError(f"unknown route {route!r}")
    S = sigma_eps(system, Hw, H1)
    geom, R, Rp, groups = residual_geometry(H, H1, S, system.n_dims)
    col_blocks = {
        "H": [system.stages[0].m] + [s.m for s in system.stages[1:]],
        "H1": system.n_dims,
        "Hw": [s.m for s in system.stages[1:]],
    }
    return StructureMatrices(H=H, H1=H1, Hw=Hw, Sigma_eps=S, geometry=geom, R=R, Rp=Rp,
                             groups=groups, row_slices=system.block_slices(), col_blocks=col_blocks)


def compare_routes(system: SystemModel, tol: float = 1e-8) -> dict:
    """Closed form vs impulse oracle.

    Returns ``{name: (max_abs_err, [(i, j, err), ...])}`` listing every
    (row-stage, column-block) pair whose error exceeds ``tol``.
    """
    oracle = dict(zip(("H", "H1", "Hw"), oracle_matrices(system)))
    closed = {"H": closed_form_H(system), "H1": closed_form_H1(system), "Hw": closed_form_Hw(system)}
    rows = system.n_dims
    cols = {
        "H": [system.stages[0].m] + [s.m for s in system.stages[1:]],
        "H1": rows,
        "Hw": [s.m for s in system.stages[1:]],
    }
    report = {}
    for name in ("H", "H1", "Hw"):
        diff = np.abs(closed[name] - oracle[name])
        bad = []
        r0 = 0
        for i, nr in enumerate(rows):
            c0 = 0
            for j, nc in enumerate(cols[name]):
                err = float(diff[r0:r0 + nr, c0:c0 + nc].max(initial=0.0))
                if err > tol:
                    bad.append((i, j, err))
                c0 += nc
            r0 += nr
        report[name] = (float(diff.max(initial=0.0)), bad)
    return report
