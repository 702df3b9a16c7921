"""Multistage system data model, validation and JSON (de)serialization.

A system has stages ``0..K``.  Stage 0 only measures the raw input
(``y0 = C0 x0 + v0``); stages ``k >= 1`` carry dynamics

    x_k = A_k x_{k-1} + B_k u_k + w_k
    y_k = C_k x_k + v_k

The on-disk format is JSON, see ``README.md`` for the schema.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

SYM_TOL = 1e-12
PSD_TOL = 1e-10


class ModelError(Exception):
    """Base class for model/configuration problems."""


class ConfigParseError(ModelError):
    pass


class NumericalError(ModelError):
    """Synthesis or geometry failure (singular or rank-deficient matrices)."""


class ValidationError(ModelError):
    """Raised by :func:`load_system` when invariants are violated."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


@dataclass(frozen=True)
class Violation:
    type: str
    stage: Optional[int]
    field: str
    rule: str

    def __str__(self):
        where = "" if self.stage is None else f" stage {self.stage}"
        return f"{self.type}{where} field {self.field}: {self.rule}"


@dataclass(frozen=True, eq=False)
class StageModel:
    k: int
    C: np.ndarray
    V: np.ndarray
    A: Optional[np.ndarray] = None
    B: Optional[np.ndarray] = None
    W: Optional[np.ndarray] = None

    @property
    def m(self) -> int:
        return self.C.shape[1]

    @property
    def n(self) -> int:
        return self.C.shape[0]

    @property
    def p(self) -> int:
        return 0 if self.B is None else self.B.shape[1]


@dataclass(frozen=True, eq=False)
class Gains:
    """Synthesized gains.  ``L[k-1]``, ``LR[k-1]`` belong to stage k >= 1;
    ``K[k]`` is the Kalman gain of stage k >= 0."""

    L: tuple
    LR: tuple
    K: tuple


@dataclass(frozen=True, eq=False)
class SystemModel:
    stages: tuple
    x0: np.ndarray
    refs: tuple
    U: np.ndarray
    Z: np.ndarray
    F: np.ndarray
    prior_cov: np.ndarray
    noise_seed: int = 0
    gains: Optional[Gains] = None
    description: str = ""

    @property
    def K(self) -> int:
        return len(self.stages) - 1

    @property
    def n_dims(self) -> list:
        return [s.n for s in self.stages]

    @property
    def m_dims(self) -> list:
        return [s.m for s in self.stages]

    @property
    def N(self) -> int:
        return sum(self.n_dims)

    def block_slices(self) -> list:
        """Row slices of each stage inside the stacked measurement vector."""
        out, start = [], 0
        for n in self.n_dims:
            out.append(slice(start, start + n))
            start += n
        return out

    def augmented_state(self) -> np.ndarray:
        return np.concatenate([self.x0] + list(self.refs))

    def with_gains(self, gains: Gains) -> "SystemModel":
        return replace(self, gains=gains)


@dataclass(frozen=True)
class AttackSpec:
    """False-data injection on one stage.

    Either ``delta`` is given, or ``snr`` (with an optional unit
    ``direction``; a missing direction is redrawn per product).
    """

    stage: int
    delta: Optional[np.ndarray] = None
    direction: Optional[np.ndarray] = None
    snr: Optional[float] = None

    def __post_init__(self):
        if self.delta is None and self.snr is None:
            raise ValueError("AttackSpec needs delta or snr")
        if self.snr is not None and self.snr < 0:
            raise ValueError("snr must be nonnegative")


# --------------------------------------------------------------------------
# validation


def _check_cov(violations, name, stage, M, dim):
    if M.shape != (dim, dim):
        violations.append(Violation("StageModel", stage, name, f"shape {M.shape} != {(dim, dim)}"))
        return
    if not np.allclose(M, M.T, atol=SYM_TOL, rtol=0):
        violations.append(Violation("StageModel", stage, name, "not symmetric"))
        return
    if np.linalg.eigvalsh(M).min() < -PSD_TOL:
        violations.append(Violation("StageModel", stage, name, "not positive semi-definite"))


def _check_weight(violations, name, M, dim):
    if M.shape != (dim, dim):
        violations.append(Violation("SystemModel", None, name, f"shape {M.shape} != {(dim, dim)}"))
        return
    if not np.allclose(M, M.T, atol=SYM_TOL, rtol=0):
        violations.append(Violation("SystemModel", None, name, "not symmetric"))
    elif np.linalg.eigvalsh(M).min() < -PSD_TOL:
        violations.append(Violation("SystemModel", None, name, "not positive semi-definite"))


def validate(system: SystemModel) -> list:
    """Return the list of invariant violations (empty when the model is valid)."""
    v = []
    stages = system.stages
    if not stages:
        return [Violation("SystemModel", None, "stages", "no stages")]
    for idx, st in enumerate(stages):
        if st.k != idx:
            v.append(Violation("StageModel", idx, "k", f"index {st.k} out of order"))
        if st.C.ndim != 2:
            v.append(Violation("StageModel", idx, "C", "not a matrix"))
            continue
        n, m = st.C.shape
        _check_cov(v, "V", idx, st.V, n)
        if idx == 0:
            for name in ("A", "B", "W"):
                if getattr(st, name) is not None:
                    v.append(Violation("StageModel", 0, name, "stage 0 is measurement-only"))
            continue
        m_prev = stages[idx - 1].C.shape[1]
        if st.A is None or st.B is None or st.W is None:
            v.append(Violation("StageModel", idx, "A/B/W", "missing dynamics matrices"))
            continue
        if st.A.shape != (m, m_prev):
            v.append(Violation("StageModel", idx, "A", f"shape {st.A.shape} != {(m, m_prev)}"))
        if st.B.ndim != 2 or st.B.shape[0] != m:
            v.append(Violation("StageModel", idx, "B", f"shape {st.B.shape} has != {m} rows"))
        _check_cov(v, "W", idx, st.W, m)

    K = len(stages) - 1
    if system.x0.shape != (stages[0].m,):
        v.append(Violation("SystemModel", None, "x0", f"length {system.x0.shape} != {stages[0].m}"))
    if len(system.refs) != K:
        v.append(Violation("SystemModel", None, "refs", f"{len(system.refs)} reference vectors for K={K}"))
    else:
        for k, r in enumerate(system.refs, start=1):
            if r.shape != (stages[k].m,):
                v.append(Violation("SystemModel", k, "refs", f"length {r.shape} != {stages[k].m}"))
    if K >= 1:
        ms = {s.m for s in stages[1:]}
        ps = {s.p for s in stages[1:] if s.B is not None}
        if len(ms) == 1:
            (m,) = ms
            _check_weight(v, "U", system.U, m)
            _check_weight(v, "F", system.F, stages[-1].m)
        else:
            v.append(Violation("SystemModel", None, "U", "stages 1..K must share a state dimension"))
        if len(ps) == 1:
            _check_weight(v, "Z", system.Z, ps.pop())
        elif len(ps) > 1:
            v.append(Violation("SystemModel", None, "Z", "stages 1..K must share a control dimension"))
    _check_weight(v, "prior_cov", system.prior_cov, stages[0].m)

    g = system.gains
    if g is not None:
        if len(g.L) != K or len(g.LR) != K or len(g.K) != K + 1:
            v.append(Violation("SystemModel", None, "gains", "gain lists do not cover every stage"))
    return v


# --------------------------------------------------------------------------
# (de)serialization


def _mat(obj, name, k=None):
    try:
        a = np.array(obj, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigParseError(f"stage {k} field {name}: not numeric ({exc})") from None
    if a.ndim != 2:
        raise ConfigParseError(f"stage {k} field {name}: expected a 2-D array")
    return a


def _vec(obj, name):
    try:
        a = np.array(obj, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigParseError(f"field {name}: not numeric ({exc})") from None
    if a.ndim != 1:
        raise ConfigParseError(f"field {name}: expected a 1-D array")
    return a


def system_from_dict(d: dict) -> SystemModel:
    try:
        raw_stages = d["stages"]
        lqg = d["lqg"]
        stages = []
        for s in raw_stages:
            k = int(s["k"])
            kw = {}
            for name in ("A", "B", "W"):
                if name in s:
                    kw[name] = _mat(s[name], name, k)
            stages.append(StageModel(k=k, C=_mat(s["C"], "C", k), V=_mat(s["V"], "V", k), **kw))
        x0 = _vec(d["x0"], "x0")
        refs = tuple(_vec(r, "refs") for r in d["refs"])
        U, Z, F = (_mat(lqg[n], n) for n in ("U", "Z", "F"))
    except KeyError as exc:
        raise ConfigParseError(f"missing field {exc}") from None
    prior = d.get("prior_cov")
    prior = np.eye(stages[0].m) if prior is None else _mat(prior, "prior_cov")
    gains = None
    if d.get("gains") is not None:
        g = d["gains"]
        gains = Gains(
            L=tuple(_mat(a, "L") for a in g["L"]),
            LR=tuple(_mat(a, "LR") for a in g["LR"]),
            K=tuple(_mat(a, "K") for a in g["K"]),
        )
    return SystemModel(
        stages=tuple(stages), x0=x0, refs=refs, U=U, Z=Z, F=F, prior_cov=prior,
        noise_seed=int(d.get("noise_seed", 0)), gains=gains,
        description=str(d.get("description", "")),
    )


def system_to_dict(system: SystemModel) -> dict:
    stages = []
    for s in system.stages:
        entry = {"k": s.k}
        for name in ("A", "B", "C", "W", "V"):
            M = getattr(s, name)
            if M is not None:
                entry[name] = M.tolist()
        stages.append(entry)
    d = {
        "description": system.description,
        "noise_seed": system.noise_seed,
        "stages": stages,
        "x0": system.x0.tolist(),
        "refs": [r.tolist() for r in system.refs],
        "lqg": {"U": system.U.tolist(), "Z": system.Z.tolist(), "F": system.F.tolist()},
        "prior_cov": system.prior_cov.tolist(),
    }
    if system.gains is not None:
        g = system.gains
        d["gains"] = {
            "L": [a.tolist() for a in g.L],
            "LR": [a.tolist() for a in g.LR],
            "K": [a.tolist() for a in g.K],
        }
    return d


def load_system(path) -> SystemModel:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigParseError(f"{path}: {exc}") from None
    if not isinstance(d, dict):
        raise ConfigParseError(f"{path}: top level must be an object")
    system = system_from_dict(d)
    violations = validate(system)
    if violations:
        raise ValidationError(violations)
    return system


def dumps_system(system: SystemModel) -> str:
    # json writes floats with repr(), which round-trips exactly
    return json.dumps(system_to_dict(system), indent=1) + "\n"


def save_system(system: SystemModel, path) -> None:
    Path(path).write_text(dumps_system(system))


def systems_equal(a: SystemModel, b: SystemModel, atol: float = 1e-15) -> bool:
    """Field-by-field comparison used for round-trip checks."""

    def same(x, y):
        if x is None or y is None:
            return x is None and y is None
        return x.shape == y.shape and np.allclose(x, y, atol=atol, rtol=0)

    if len(a.stages) != len(b.stages) or len(a.refs) != len(b.refs):
        return False
    for s, t in zip(a.stages, b.stages):
        if s.k != t.k or not all(same(getattr(s, n), getattr(t, n)) for n in ("A", "B", "C", "W", "V")):
            return False
    if not all(same(getattr(a, n), getattr(b, n)) for n in ("x0", "U", "Z", "F", "prior_cov")):
        return False
    if not all(same(r, q) for r, q in zip(a.refs, b.refs)):
        return False
    if (a.gains is None) != (b.gains is None):
        return False
    if a.gains is not None:
        for name in ("L", "LR", "K"):
            ga, gb = getattr(a.gains, name), getattr(b.gains, name)
            if len(ga) != len(gb) or not all(same(x, y) for x, y in zip(ga, gb)):
                return False
    return a.noise_seed == b.noise_seed


def random_system(rng: np.random.Generator, K: int, m: int, n: Sequence[int], p: Optional[int] = None,
                  m0: Optional[int] = None, scale: float = 0.5, noise: float = 0.1) -> SystemModel:
    """Random stable system used by property tests and self-checks.

    ``A_k`` is rescaled to spectral norm ``scale`` so the open-loop cascade
    contracts.
    """
    p = m if p is None else p
    m0 = m if m0 is None else m0
    if len(n) != K + 1:
        raise ValueError("need one sensor count per stage")
    stages = [StageModel(k=0, C=rng.standard_normal((n[0], m0)), V=noise * np.eye(n[0]))]
    m_prev = m0
    for k in range(1, K + 1):
        A = rng.standard_normal((m, m_prev))
        A *= scale / np.linalg.norm(A, 2)
        stages.append(StageModel(
            k=k, A=A, B=rng.standard_normal((m, p)), C=rng.standard_normal((n[k], m)),
            W=noise * np.eye(m), V=noise * np.eye(n[k]),
        ))
        m_prev = m
    return SystemModel(
        stages=tuple(stages), x0=rng.standard_normal(m0),
        refs=tuple(rng.standard_normal(m) for _ in range(K)),
        U=np.eye(m), Z=np.eye(p), F=np.eye(m), prior_cov=np.eye(m0),
    )
