"""Group-lasso attack detection and localization for multistage manufacturing processes."""

from .control import synthesize
from .detect import BenchmarkDetector, DetectionResult, GlhadDetector, chi2_quantile
from .model import AttackSpec, StageModel, SystemModel, load_system, save_system, validate
from .simulate import ClosedLoop, make_attack, run_product
from .structure import StructureMatrices, build_structures

__all__ = [
    "AttackSpec", "BenchmarkDetector", "ClosedLoop", "DetectionResult", "GlhadDetector", "StageModel",
    "StructureMatrices", "SystemModel", "build_structures", "chi2_quantile", "load_system", "make_attack",
    "run_product", "save_system", "synthesize", "validate",
]
