"""Closed-loop simulation of one product through the multistage process.

The core :func:`propagate` works column-wise on batches so the same code
serves Monte-Carlo runs and the impulse-response construction of the
structure matrices.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .control import require_gains
from .model import AttackSpec, SystemModel


@dataclass
class Trajectory:
    y: list      # per stage, n_k x B
    x: list      # per stage, m_k x B
    xhat: list   # filtered estimates, m_k x B
    u: list      # per stage k >= 1, p_k x B (index 0 is None)

    def stacked_y(self) -> np.ndarray:
        return np.vstack(self.y)


def propagate(system: SystemModel, x0, refs, w, eta) -> Trajectory:
    """Run the noise-driven closed loop for a batch of B columns.

    ``x0``: m0 x B; ``refs[k-1]``: m_k x B; ``w[k-1]``: m_k x B for k >= 1;
    ``eta[k]``: n_k x B measurement-channel input (sensor noise plus any
    injected bias) for k = 0..K.
    """
    g = require_gains(system)
    st0 = system.stages[0]
    y0 = st0.C @ x0 + eta[0]
    xhat0 = g.K[0] @ y0  # zero prior mean
    ys, xs, xhats, us = [y0], [x0], [xhat0], [None]
    x, xhat = x0, xhat0
    for k in range(1, system.K + 1):
        st = system.stages[k]
        u = g.L[k - 1] @ xhat + g.LR[k - 1] @ refs[k - 1]
        x = st.A @ x + st.B @ u + w[k - 1]
        y = st.C @ x + eta[k]
        pred = st.A @ xhat + st.B @ u
        xhat = pred + g.K[k] @ (y - st.C @ pred)
        ys.append(y)
        xs.append(x)
        xhats.append(xhat)
        us.append(u)
    return Trajectory(y=ys, x=xs, xhat=xhats, u=us)


def _cov_sqrt(M):
    # symmetric square root; tolerates singular PSD covariances
    vals, vecs = np.linalg.eigh(0.5 * (M + M.T))
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


class NoiseSampler:
    """Draws stage noises from their covariances, stage by stage in order."""

    def __init__(self, system: SystemModel):
        self.system = system
        self.w_sqrt = [_cov_sqrt(s.W) for s in system.stages[1:]]
        self.v_sqrt = [_cov_sqrt(s.V) for s in system.stages]

    def draw(self, rng: np.random.Generator, batch: int = 1):
        w, v = [], []
        for k, Vs in enumerate(self.v_sqrt):
            if k > 0:
                Ws = self.w_sqrt[k - 1]
                w.append(Ws @ rng.standard_normal((Ws.shape[1], batch)))
            v.append(Vs @ rng.standard_normal((Vs.shape[1], batch)))
        return w, v


@dataclass
class RunRecord:
    y: np.ndarray
    x: list
    xhat: list
    u: list
    attack: Optional[AttackSpec]
    seed: int


def _stack_delta(system: SystemModel, stage: int, delta) -> list:
    if not 0 <= stage <= system.K:
        raise ValueError(f"attack stage {stage} outside 0..{system.K}")
    delta = np.asarray(delta, dtype=float).reshape(-1)
    if delta.shape != (system.stages[stage].n,):
        raise ValueError(f"delta has length {delta.size}, stage {stage} has {system.stages[stage].n} sensors")
    return delta


class ClosedLoop:
    """Pre-factored simulator for repeated products of one system."""

    def __init__(self, system: SystemModel):
        require_gains(system)
        self.system = system
        self.noise = NoiseSampler(system)
        self._x0 = system.x0[:, None]
        self._refs = [r[:, None] for r in system.refs]

    def run(self, rng: np.random.Generator, batch: int = 1, stage: Optional[int] = None,
            delta=None) -> Trajectory:
        """Simulate ``batch`` products.  ``delta`` is n_stage, or n_stage x batch."""
        w, v = self.noise.draw(rng, batch)
        if stage is not None:
            d = np.asarray(delta, dtype=float)
            if d.ndim == 1:
                d = _stack_delta(self.system, stage, d)[:, None]
            elif not 0 <= stage <= self.system.K:
                raise ValueError(f"attack stage {stage} outside 0..{self.system.K}")
            v[stage] = v[stage] + d
        x0 = np.repeat(self._x0, batch, axis=1)
        refs = [np.repeat(r, batch, axis=1) for r in self._refs]
        return propagate(self.system, x0, refs, w, v)

    def measurements(self, rng, batch=1, stage=None, delta=None) -> np.ndarray:
        """Stacked measurements, shape batch x N."""
        return self.run(rng, batch, stage, delta).stacked_y().T


def run_product(system: SystemModel, attack: Optional[AttackSpec] = None, seed: int = 0,
                rng: Optional[np.random.Generator] = None) -> RunRecord:
    """Simulate one product.  Identical (system, attack, seed) give identical records."""
    rng = np.random.default_rng(seed) if rng is None else rng
    stage = delta = None
    if attack is not None:
        stage = attack.stage
        if attack.delta is None:
            raise ValueError("run_product needs a concrete delta; use make_attack first")
        delta = _stack_delta(system, stage, attack.delta)
    traj = ClosedLoop(system).run(rng, 1, stage, delta)
    return RunRecord(
        y=traj.stacked_y()[:, 0],
        x=[a[:, 0] for a in traj.x],
        xhat=[a[:, 0] for a in traj.xhat],
        u=[None if a is None else a[:, 0] for a in traj.u],
        attack=attack,
        seed=seed,
    )


def stage_cov_pinv(block: np.ndarray, rel_tol: float = 1e-10):
    vals, vecs = np.linalg.eigh(0.5 * (block + block.T))
    keep = vals > rel_tol * max(vals.max(), 0.0)
    return vecs[:, keep], vals[keep]


def snr_of(delta, cov_block) -> float:
    """``sqrt(delta' Cov^+ delta)`` using the retained eigen-subspace."""
    vecs, vals = stage_cov_pinv(cov_block)
    c = vecs.T @ np.asarray(delta, dtype=float)
    return float(np.sqrt(np.sum(c * c / vals)))


def make_attack(system: SystemModel, structures, stage: int, direction, snr: float) -> AttackSpec:
    """Scale ``direction`` so that the attack has exactly the requested SNR.

    The SNR uses the stage block of Cov(y) = Sigma_eps.
    """
    if not 0 <= stage <= system.K:
        raise ValueError(f"attack stage {stage} outside 0..{system.K}")
    direction = np.asarray(direction, dtype=float).reshape(-1)
    if direction.shape != (system.stages[stage].n,):
        raise ValueError("direction dimension does not match the stage sensor count")
    if not np.any(direction):
        raise ValueError("attack direction is zero")
    if snr < 0:
        raise ValueError("snr must be nonnegative")
    sl = system.block_slices()[stage]
    base = snr_of(direction, structures.Sigma_eps[sl, sl])
    if base <= 0:
        raise ValueError("attack direction lies in the null space of the stage covariance")
    delta = (snr / base) * direction
    return AttackSpec(stage=stage, delta=delta, direction=direction / np.linalg.norm(direction), snr=snr)


def random_direction(rng: np.random.Generator, n: int) -> np.ndarray:
    d = rng.standard_normal(n)
    return d / np.linalg.norm(d)
