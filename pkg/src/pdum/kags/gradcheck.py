"""Central finite-difference gradient checks and the registry of module checks."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, OracleError, ValidationError
from .tensor import Tensor, backward, default_dtype, no_grad

__all__ = [
    "GradCheckReport",
    "grad_check_finite_diff",
    "register_check",
    "registered_checks",
    "run_checks",
]

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

CheckFn = Callable[[int], "GradCheckReport"]

_CHECKS: dict[str, CheckFn] = {}


@dataclass(frozen=True)
class GradCheckReport:
    op_name: str
    max_rel_error: float
    element_count: int
    passed: bool
    tol: float


def grad_check_finite_diff(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    *,
    op_name: str = "f",
) -> GradCheckReport:
    """
    Compare reverse-mode gradients of ``f(*inputs)`` against central differences.

    Inputs are promoted to float64 in place and ``f`` is evaluated inside a
    float64 :func:`~pdum.kags.tensor.default_dtype` scope. The error of one
    element is ``|a - n| / max(|a|, |n|, 1e-8)``.

    Parameters
    ----------
    f : Callable[..., Tensor]
        Builds a scalar from ``inputs``; must be deterministic.
    inputs : Sequence[Tensor]
        Tensors to perturb. They are marked as requiring gradients.
    step : float, optional
        Finite-difference step ``h``.
    tol : float, optional
        Pass threshold on the largest relative error.
    op_name : str, optional
        Name carried by the report.

    Returns
    -------
    GradCheckReport
        ``passed`` is true when the largest relative error is below ``tol``.

    Raises
    ------
    ContractError
        If ``step`` is not positive or no input is given.
    OracleError
        If two evaluations of ``f`` on identical inputs differ.
    """

    if not step > 0:
        raise ContractError(f"finite-difference step must be positive, got {step}")
    if not inputs:
        raise ContractError("grad_check_finite_diff needs at least one input")

    with default_dtype(np.float64):
        for tensor in inputs:
            tensor.data = tensor.data.astype(np.float64)
            tensor.requires_grad = True
            tensor.zero_grad()

        def evaluate() -> float:
            with no_grad():
                return f(*inputs).item()

        first, second = evaluate(), evaluate()
        if first != second:
            raise OracleError(f"{op_name}: two evaluations on identical inputs differ ({first!r} vs {second!r})")

        backward(f(*inputs))
        worst = 0.0
        count = 0
        for tensor in inputs:
            analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
            flat = tensor.data.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + step
                plus = evaluate()
                flat[i] = original - step
                minus = evaluate()
                flat[i] = original
                numeric = (plus - minus) / (2.0 * step)
                a = float(analytic.reshape(-1)[i])
                worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
            count += flat.size
            tensor.zero_grad()

    report = GradCheckReport(op_name, worst, count, worst < tol, tol)
    logger.debug("gradcheck %s: max rel error %.3e over %d elements", op_name, worst, count)
    return report


def register_check(name: str) -> Callable[[CheckFn], CheckFn]:
    """Register a seeded check under ``name`` for :func:`run_checks`."""

    def decorator(fn: CheckFn) -> CheckFn:
        if name in _CHECKS:
            raise ContractError(f"gradient check {name!r} registered twice")
        _CHECKS[name] = fn
        return fn

    return decorator


def registered_checks() -> list[str]:
    from . import checks  # noqa: F401  (registers the built-in checks)

    return list(_CHECKS)


def run_checks(names: Iterable[str] | None = None, *, seed: int = 0) -> list[GradCheckReport]:
    """Run the named checks (all when ``names`` is None) in registration order.

    Raises
    ------
    ValidationError
        If a name is not registered.
    """

    available = registered_checks()
    selected = available if names is None else list(names)
    unknown = [name for name in selected if name not in _CHECKS]
    if unknown:
        raise ValidationError(f"unknown gradient check(s) {', '.join(unknown)}; available: {', '.join(available)}")
    reports = []
    for name in selected:
        report = _CHECKS[name](seed)
        logger.info("%s: max rel error %.2e (%s)", name, report.max_rel_error, "ok" if report.passed else "FAILED")
        reports.append(report)
    return reports
