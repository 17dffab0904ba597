from verification.gradient_checker import (
    GradientCheckReport,
    GradientChecker,
    LayerCheck,
    format_gradcheck_report,
    run_gradient_checks,
)

__all__ = [
    "GradientCheckReport",
    "GradientChecker",
    "LayerCheck",
    "format_gradcheck_report",
    "run_gradient_checks",
]
