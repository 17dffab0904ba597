"""Finite-difference verification of every analytic gradient.

Each check perturbs one entry at a time by +-h, evaluates the scalar loss in
float64 and compares the central difference against the backward pass.
Probes whose perturbed forwards flip a ReLU or move a max-pool winner sit on
a kink and are left out of the comparison.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from layers import (
    ConvLayer,
    DenseLayer,
    PoolLayer,
    conv_backward,
    conv_forward,
    dense_backward,
    dense_forward,
    maxpool_backward,
    maxpool_forward,
    relu_backward,
    relu_forward,
    softmax,
)
from network import NetworkConfig, build
from tensor_core import make_rng
from training import batch_class_weights, cross_entropy_loss

logger = logging.getLogger(__name__)

FD_STEP = 1e-3
TOLERANCE = 1e-4
# Entries smaller than this in both gradients are left out of the per-entry error
ENTRY_FLOOR = 1e-6

# Small enough to probe every parameter in well under a second
TINY_NETWORK = NetworkConfig(
    input_hw=(12, 12),
    conv_specs=((2, 3), (3, 3)),
    pool_after=(1,),
    fc_dims=(4, 2),
)

# (name, analytic gradient) -> gradient actually compared; used to break the harness on purpose
GradHook = Callable[[str, np.ndarray], np.ndarray]
Signature = Tuple[np.ndarray, ...]


@dataclass
class LayerCheck:
    name: str
    tensor_errors: Dict[str, float] = field(default_factory=dict)
    entry_errors: Dict[str, float] = field(default_factory=dict)
    probes: int = 0
    excluded: int = 0

    @property
    def max_relative_error(self) -> float:
        return max(self.tensor_errors.values()) if self.tensor_errors else 0.0

    @property
    def max_entry_error(self) -> float:
        return max(self.entry_errors.values()) if self.entry_errors else 0.0


@dataclass
class GradientCheckReport:
    checks: List[LayerCheck]
    tolerance: float = TOLERANCE
    seed: int = 0

    def failures(self) -> List[LayerCheck]:
        # NaN compares false, so test the negation
        return [c for c in self.checks if not c.max_relative_error < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures()


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||, 1e-12)"""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denominator = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denominator)


def entry_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ENTRY_FLOOR) -> float:
    """max |a_i - n_i| / max(|a_i|, |n_i|) over entries at or above ``floor``"""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = np.maximum(np.abs(a), np.abs(n))
    kept = scale >= floor
    if not kept.any():
        return 0.0
    return float(np.max(np.abs(a[kept] - n[kept]) / scale[kept]))


def _same_signature(left: Signature, right: Signature) -> bool:
    return len(left) == len(right) and all(np.array_equal(a, b) for a, b in zip(left, right))


def numeric_gradient(evaluate: Callable[[], Tuple[float, Signature]], array: np.ndarray,
                     step: float = FD_STEP) -> Tuple[np.ndarray, np.ndarray]:
    """Central differences of ``evaluate`` with respect to ``array`` (perturbed in place).

    Returns the gradient and a mask of the probes that stayed off kinks.
    """
    _, base = evaluate()
    grad = np.zeros(array.shape, dtype=np.float64)
    usable = np.ones(array.shape, dtype=bool)
    for index in np.ndindex(array.shape):
        original = array[index]
        array[index] = original + step
        plus, plus_sig = evaluate()
        array[index] = original - step
        minus, minus_sig = evaluate()
        array[index] = original
        grad[index] = (plus - minus) / (2 * step)
        if not (_same_signature(base, plus_sig) and _same_signature(base, minus_sig)):
            usable[index] = False
    return grad, usable


class GradientChecker:
    def __init__(self, seed: int = 0, step: float = FD_STEP, tolerance: float = TOLERANCE,
                 grad_hook: Optional[GradHook] = None):
        """
        Set up the checker; every random instance is drawn from ``seed``.
        """
        self.seed = seed
        self.step = step
        self.tolerance = tolerance
        self.grad_hook = grad_hook
        self.rng = make_rng(seed)
        logger.info(f"🔎 Gradient checker ready (seed {seed}, h={step}, tolerance {tolerance})")

    def _analytic(self, name: str, grad: np.ndarray) -> np.ndarray:
        return self.grad_hook(name, grad) if self.grad_hook else grad

    def _compare(self, check: LayerCheck, name: str, analytic: np.ndarray,
                 evaluate, array: np.ndarray):
        numeric, usable = numeric_gradient(evaluate, array, self.step)
        analytic = self._analytic(name, np.asarray(analytic, dtype=np.float64))
        check.tensor_errors[name] = relative_error(analytic[usable], numeric[usable])
        check.entry_errors[name] = entry_relative_error(analytic[usable], numeric[usable])
        check.probes += int(usable.sum())
        check.excluded += int((~usable).sum())

    def _normal(self, *shape) -> np.ndarray:
        return self.rng.standard_normal(shape)

    # ---------------------------
    # Single layers
    # ---------------------------
    def check_conv(self) -> LayerCheck:
        layer = ConvLayer(weights=self._normal(3, 2, 3, 3), bias=self._normal(3), stride=1, padding=1)
        x = self._normal(2, 2, 6, 6)
        d_out = self._normal(2, 3, 6, 6)
        grads = conv_backward(layer, x, d_out)

        def evaluate():
            return float(np.sum(d_out * conv_forward(layer, x))), ()

        check = LayerCheck("conv")
        self._compare(check, "conv.weight", grads.d_weights, evaluate, layer.weights)
        self._compare(check, "conv.bias", grads.d_bias, evaluate, layer.bias)
        self._compare(check, "conv.input", grads.d_input, evaluate, x)
        return check

    def check_maxpool(self) -> LayerCheck:
        layer = PoolLayer()
        x = self._normal(2, 2, 7, 6)
        out, cache = maxpool_forward(layer, x)
        d_out = self._normal(*out.shape)
        d_input = maxpool_backward(cache, d_out)

        def evaluate():
            y, probe_cache = maxpool_forward(layer, x)
            return float(np.sum(d_out * y)), (probe_cache.winners,)

        check = LayerCheck("maxpool")
        self._compare(check, "maxpool.input", d_input, evaluate, x)
        return check

    def check_relu(self) -> LayerCheck:
        magnitude = self.rng.uniform(0.1, 1.0, size=(3, 4, 5))
        x = np.where(self.rng.random((3, 4, 5)) < 0.5, -magnitude, magnitude)
        d_out = self._normal(3, 4, 5)
        d_input = relu_backward(x, d_out)

        def evaluate():
            return float(np.sum(d_out * relu_forward(x))), (x > 0,)

        check = LayerCheck("relu")
        self._compare(check, "relu.input", d_input, evaluate, x)
        return check

    def check_dense(self) -> LayerCheck:
        layer = DenseLayer(weights=self._normal(4, 6), bias=self._normal(4))
        x = self._normal(3, 6)
        d_out = self._normal(3, 4)
        grads = dense_backward(layer, x, d_out)

        def evaluate():
            return float(np.sum(d_out * dense_forward(layer, x))), ()

        check = LayerCheck("dense")
        self._compare(check, "dense.weight", grads.d_weights, evaluate, layer.weights)
        self._compare(check, "dense.bias", grads.d_bias, evaluate, layer.bias)
        self._compare(check, "dense.input", grads.d_input, evaluate, x)
        return check

    def check_softmax_cross_entropy(self) -> LayerCheck:
        logits = self._normal(6, 2)
        labels = np.array([1, 0, 0, 1, 0, 0])
        check = LayerCheck("softmax_cross_entropy")
        for tag, weights in (("plain", None), ("class_weighted", batch_class_weights(labels))):
            _, d_logits = cross_entropy_loss(softmax(logits), labels, weights)

            def evaluate(weights=weights):
                return cross_entropy_loss(softmax(logits), labels, weights)[0], ()

            self._compare(check, f"softmax_cross_entropy.{tag}", d_logits, evaluate, logits)
        return check

    # ---------------------------
    # Whole network
    # ---------------------------
    def check_network(self, config: NetworkConfig = TINY_NETWORK) -> List[LayerCheck]:
        """One check per parameterized layer of a float64 copy of ``config``"""
        net = build(config, self.rng).astype(np.float64)
        batch = self._normal(3, config.in_channels, *config.input_hw)
        labels = np.array([1, 0, 1])

        probs, trace = net.forward(batch)
        _, d_logits = cross_entropy_loss(probs, labels)
        grads = net.backward(trace, d_logits)

        def evaluate():
            probe_probs, probe_trace = net.forward(batch)
            signature = tuple(p > 0 for p in probe_trace.conv_preacts)
            signature += tuple(p > 0 for p in probe_trace.fc_preacts[:-1])
            signature += tuple(c.winners for c in probe_trace.pool_caches if c is not None)
            return cross_entropy_loss(probe_probs, labels)[0], signature

        checks: Dict[str, LayerCheck] = {}
        for name, param in net.params.items():
            layer_name = name.split(".")[0]
            check = checks.setdefault(layer_name, LayerCheck(f"network.{layer_name}"))
            self._compare(check, name, grads[name], evaluate, param)
        return list(checks.values())

    def run(self) -> GradientCheckReport:
        """
        Run every layer check and the end-to-end network check.
        """
        checks = [
            self.check_conv(),
            self.check_maxpool(),
            self.check_relu(),
            self.check_dense(),
            self.check_softmax_cross_entropy(),
        ]
        checks.extend(self.check_network())
        report = GradientCheckReport(checks=checks, tolerance=self.tolerance, seed=self.seed)
        for failed in report.failures():
            logger.error(f"❌ {failed.name}: relative error {failed.max_relative_error:.3e} "
                         f"exceeds {self.tolerance:.0e}")
        if report.passed:
            logger.info(f"✅ All {len(checks)} gradient checks passed")
        return report


def run_gradient_checks(seed: int = 0, grad_hook: Optional[GradHook] = None,
                        tolerance: float = TOLERANCE) -> GradientCheckReport:
    return GradientChecker(seed=seed, tolerance=tolerance, grad_hook=grad_hook).run()


def format_gradcheck_report(report: GradientCheckReport) -> str:
    """
    Format the report as a table: one row per checked layer.
    """
    width = max(len(c.name) for c in report.checks)
    lines = [f"{'layer':<{width}}  {'max rel error':>13}  {'max entry err':>13}  {'probes':>6}  {'kinks':>5}  status"]
    for check in report.checks:
        status = "ok" if check.max_relative_error < report.tolerance else "FAIL"
        lines.append(f"{check.name:<{width}}  {check.max_relative_error:>13.3e}  {check.max_entry_error:>13.3e}  "
                     f"{check.probes:>6}  {check.excluded:>5}  {status}")
    verdict = "PASS" if report.passed else "FAIL"
    lines.append(f"{verdict} (tolerance {report.tolerance:.0e}, seed {report.seed})")
    return "\n".join(lines)
