"""Per-stage Hotelling T^2 detection: the group-lasso detector and the in-stage benchmark."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy import special

from . import grouplasso
from .model import SystemModel
from .structure import GeometryError, StructureMatrices, _blockdiag, numerical_rank, projection_geometry

log = logging.getLogger(__name__)

GLHAD = "glhad"
BENCHMARK = "benchmark"


def chi2_quantile(p: float, d: float) -> float:
    """Inverse CDF of the chi-square distribution with ``d`` degrees of freedom."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability {p} outside (0, 1)")
    if not d >= 1:
        raise ValueError(f"degrees of freedom {d} < 1")
    # P(d/2, x/2) = p
    return 2.0 * float(special.gammaincinv(0.5 * d, p))


@dataclass
class DetectionResult:
    method: str
    t2: np.ndarray
    ucl: np.ndarray
    alarmed_stages: tuple
    localized: Optional[int]
    delta_hat: Optional[np.ndarray] = None

    @property
    def alarmed(self) -> bool:
        return bool(self.alarmed_stages)


def decide(method, t2, ucl, delta_hat=None) -> DetectionResult:
    """Alarm every stage above its UCL; localize to the largest statistic.

    Exact ties go to the lowest stage index.
    """
    t2 = np.asarray(t2, dtype=float)
    alarmed = tuple(int(k) for k in np.flatnonzero(t2 > ucl))
    localized = None
    if alarmed:
        localized = max(alarmed, key=lambda k: (t2[k], -k))
    return DetectionResult(method, t2, np.asarray(ucl, dtype=float), alarmed, localized, delta_hat)


def quadratic_form(coords, eig_vals) -> float:
    """``sum_i coords_i^2 / eig_vals_i`` over the retained eigenbasis."""
    c = np.asarray(coords, dtype=float)
    return float(np.sum(c * c / eig_vals))


def _ucls(dofs, alpha):
    return np.array([chi2_quantile(1.0 - alpha, d) if d > 0 else np.inf for d in dofs])


class GlhadDetector:
    """Projection residual, group-lasso attribution and per-stage T^2.

    ``lam`` is a fixed penalty or ``"auto"`` (``lambda_ratio * lambda_max``
    of each residual).  With ``refit`` the stage contributions come from a
    least-squares refit on the groups the group lasso keeps, so the
    statistics are not shrunk; ``refit=False`` uses the penalized
    coefficients directly.
    """

    method = GLHAD

    def __init__(self, structures: StructureMatrices, alpha: float = 0.01,
                 lam: Union[str, float] = "auto", lambda_ratio: float = 0.1,
                 refit: bool = True, squared: bool = False, tol: float = 1e-10, max_iter: int = 10_000):
        if not 0.0 < alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        self.S = structures
        self.alpha = alpha
        self.lam = lam
        self.lambda_ratio = lambda_ratio
        self.refit = refit
        self.squared = squared
        self.tol = tol
        self.max_iter = max_iter
        self.dofs = [d for _, d in structures.groups]
        self.ucl = _ucls(self.dofs, alpha)
        # groups that survived the per-group reduction
        self._live = [g for g, d in enumerate(self.dofs) if d > 0]
        self._live_groups = []
        pos = 0
        for g in self._live:
            self._live_groups.append((pos, self.dofs[g]))
            pos += self.dofs[g]
        self._blocks = grouplasso.prepare_blocks(structures.Rp, self._live_groups)
        geom = structures.geometry
        # eigen-coordinates of every dictionary column, scaled by 1/sqrt(eigenvalue)
        self._white = (geom.eig_vecs.T @ structures.Rp) / np.sqrt(geom.eig_vals)[:, None]

    def penalty(self, r) -> float:
        if self.lam == "auto":
            return self.lambda_ratio * grouplasso.lambda_max(self.S.Rp, r, self._live_groups)
        return float(self.lam)

    def __call__(self, y) -> DetectionResult:
        y = np.asarray(y, dtype=float)
        if y.shape != (self.S.H.shape[0],):
            raise ValueError(f"y has shape {y.shape}, expected ({self.S.H.shape[0]},)")
        Rp = self.S.Rp
        r = self.S.geometry.residual(y)
        prob = grouplasso.GroupProblem(Rp, r, self._live_groups, self.penalty(r), squared=self.squared)
        sol = grouplasso.solve(prob, tol=self.tol, max_iter=self.max_iter, blocks=self._blocks)
        coef = sol.delta_hat
        if self.refit:
            active = [i for i, (s, d) in enumerate(self._live_groups) if np.any(coef[s:s + d])]
            coef = np.zeros_like(coef)
            if active:
                cols = np.concatenate([np.arange(s, s + d) for s, d in (self._live_groups[i] for i in active)])
                coef[cols] = np.linalg.lstsq(Rp[:, cols], r, rcond=None)[0]
        t2 = np.zeros(len(self.dofs))
        for (s, d), g in zip(self._live_groups, self._live):
            c = self._white[:, s:s + d] @ coef[s:s + d]
            t2[g] = float(c @ c)
        return decide(GLHAD, t2, self.ucl, sol.delta_hat)


class BenchmarkDetector:
    """In-stage T^2 on the residual of ``y = diag(C_0..C_K) x``."""

    method = BENCHMARK

    def __init__(self, system: SystemModel, cov_y: np.ndarray, alpha: float = 0.01):
        if not 0.0 < alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        for st in system.stages:
            rk = numerical_rank(st.C)
            if rk < st.m:
                raise GeometryError(f"stage {st.k}: C is rank deficient ({rk} < {st.m})")
        self.C = _blockdiag([s.C for s in system.stages])
        self.geometry = projection_geometry(self.C, cov_y, "diag(C)")
        self.alpha = alpha
        self.slices = system.block_slices()
        cov = self.geometry.cov_r
        top = self.geometry.eig_vals.max()
        self._bases = []
        self.dofs = []
        for sl in self.slices:
            vals, vecs = np.linalg.eigh(cov[sl, sl])
            keep = vals > 1e-10 * top
            self._bases.append(vecs[:, keep] / np.sqrt(vals[keep]))
            self.dofs.append(int(keep.sum()))
        self.ucl = _ucls(self.dofs, alpha)

    def __call__(self, y) -> DetectionResult:
        y = np.asarray(y, dtype=float)
        if y.shape != (self.C.shape[0],):
            raise ValueError(f"y has shape {y.shape}, expected ({self.C.shape[0]},)")
        eps = self.geometry.residual(y)
        t2 = np.array([float(np.sum((B.T @ eps[sl]) ** 2)) for B, sl in zip(self._bases, self.slices)])
        return decide(BENCHMARK, t2, self.ucl)


def glhad_detect(structures: StructureMatrices, y, alpha: float = 0.01, lam="auto", **kw) -> DetectionResult:
    return GlhadDetector(structures, alpha, lam, **kw)(y)


def benchmark_detect(system: SystemModel, y, alpha: float = 0.01, cov_y=None) -> DetectionResult:
    """``cov_y`` defaults to Sigma_eps built from the system's structure matrices."""
    if cov_y is None:
        from .structure import build_structures
        cov_y = build_structures(system).Sigma_eps
    return BenchmarkDetector(system, cov_y, alpha)(y)


def make_detector(method: str, system: SystemModel, structures: StructureMatrices, alpha: float = 0.01,
                  lam="auto", **kw):
    if method == GLHAD:
        return GlhadDetector(structures, alpha, lam, **kw)
    if method == BENCHMARK:
        return BenchmarkDetector(system, structures.Sigma_eps, alpha)
    raise ValueError(f"unknown method {method!r}")
