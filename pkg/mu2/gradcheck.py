"""Central finite-difference oracle.

Only forward evaluations are used here; analytic gradients are read from the op
registry and compared, never reused.
"""

from __future__ import annotations

import logging
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .config import GRAD_CURVE_STEPS, GRAD_FLOOR, GRAD_STEP, GRAD_TOLERANCE
from .errors import InvalidInputError
from .models import GradCheckReport
from .ops import REGISTRY, DifferentiableOp, get_op

logger = logging.getLogger(__name__)


def central_difference(f: Callable[[np.ndarray], float], x0: np.ndarray, h: float = GRAD_STEP) -> np.ndarray:
    x = np.array(x0, dtype=np.float64).ravel()
    grad = np.empty_like(x)
    for i in range(x.size):
        original = x[i]
        x[i] = original + h
        up = float(f(x))
        x[i] = original - h
        down = float(f(x))
        x[i] = original
        if not (np.isfinite(up) and np.isfinite(down)):
            raise InvalidInputError(f"function is not finite around coordinate {i}")
        grad[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def _instance(
    op: DifferentiableOp, seed: int, shapes: Optional[Mapping[str, Any]]
) -> Tuple[Dict[str, np.ndarray], Dict[str, Any], np.ndarray, np.random.Generator]:
    rng = np.random.default_rng(seed)
    tensors, static = op.sample(rng, **dict(shapes or {}))
    out = np.asarray(op.forward(tensors, static))
    upstream = np.asarray(rng.normal(size=out.shape)) / max(out.size, 1)
    return tensors, static, upstream, rng


def _tensor_errors(
    op: DifferentiableOp,
    tensors: Dict[str, np.ndarray],
    static: Dict[str, Any],
    upstream: np.ndarray,
    steps: Sequence[float],
) -> Dict[float, Dict[str, float]]:
    analytic = op.backward(tensors, static, upstream)
    missing = sorted(set(tensors) - set(analytic))
    if missing:
        raise InvalidInputError(f"op {op.name} returned no gradient for {', '.join(missing)}")

    results: Dict[float, Dict[str, float]] = {h: {} for h in steps}
    for name, value in tensors.items():

        def projected(flat: np.ndarray, name: str = name, shape: Tuple[int, ...] = value.shape) -> float:
            trial = dict(tensors)
            trial[name] = flat.reshape(shape)
            return float(np.sum(upstream * op.forward(trial, static)))

        for h in steps:
            numeric = central_difference(projected, value, h)
            results[h][name] = relative_error(analytic[name], numeric)
    return results


def check_op(
    op_id: str,
    seed: int = 7,
    tol: float = GRAD_TOLERANCE,
    step: float = GRAD_STEP,
    shapes: Optional[Mapping[str, Any]] = None,
    registry: Optional[Mapping[str, DifferentiableOp]] = None,
) -> GradCheckReport:
    op = get_op(op_id, registry)
    tensors, static, upstream, _ = _instance(op, seed, shapes)
    errors = _tensor_errors(op, tensors, static, upstream, [step])[step]
    passed = all(err <= tol for err in errors.values())
    report = GradCheckReport(op=op.name, errors=errors, passed=passed, step=step, seed=seed, tol=tol)
    if passed:
        logger.info("grad-check %s passed (max error %.3e)", op.name, max(errors.values(), default=0.0))
    else:
        logger.warning("grad-check %s failed for %s", op.name, ", ".join(report.failing))
    return report


def check_all(
    seed: int = 7,
    tol: float = GRAD_TOLERANCE,
    step: float = GRAD_STEP,
    registry: Optional[Mapping[str, DifferentiableOp]] = None,
) -> List[GradCheckReport]:
    table = REGISTRY if registry is None else registry
    return [check_op(name, seed, tol, step, registry=table) for name in sorted(table)]


def error_curve(
    op_id: str,
    seed: int = 7,
    steps: Sequence[float] = GRAD_CURVE_STEPS,
    shapes: Optional[Mapping[str, Any]] = None,
    registry: Optional[Mapping[str, DifferentiableOp]] = None,
) -> List[Tuple[float, float]]:
    """(step, max relative error over all tensors) for each step size, largest step first."""
    op = get_op(op_id, registry)
    tensors, static, upstream, _ = _instance(op, seed, shapes)
    ordered = sorted(steps, reverse=True)
    results = _tensor_errors(op, tensors, static, upstream, ordered)
    return [(h, max(results[h].values(), default=0.0)) for h in ordered]
