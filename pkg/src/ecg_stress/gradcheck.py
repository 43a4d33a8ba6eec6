"""Central finite-difference checks for the autograd primitives and the model.

Each check projects an op's output onto a fixed random direction so the
scalar loss exercises the full Jacobian, perturbs every input element by
+/- ``step``, and compares the numerical slope with the analytic gradient.
Perturbations whose two sides take different ReLU/max-pool branches are
detected with :func:`record_kinks` and excluded (and counted) rather than
silently ignored.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Rng, Tensor

logger = logging.getLogger(__name__)

STEP = 1e-5
SMOOTH_TOL = 1e-6
PIECEWISE_TOL = 1e-4
# Denominator floor keeps gradients that are exactly zero from dividing by zero.
REL_FLOOR = 1e-8


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


@dataclass
class CheckResult:
    op: str
    max_rel_error: float
    tolerance: float
    checked: int
    kinks: int = 0
    failures: list[str] = field(default_factory=list)
    min_pass_fraction: float = 1.0

    @property
    def pass_fraction(self) -> float:
        return 1.0 - len(self.failures) / max(self.checked, 1)

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.pass_fraction >= self.min_pass_fraction

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.op:<18} max_rel_err={self.max_rel_error:.3e} tol={self.tolerance:.0e} "
            f"checked={self.checked} kinks_excluded={self.kinks} failed={len(self.failures)}"
        )


def check_gradients(
    op: str,
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    tolerance: float,
    step: float = STEP,
    min_pass_fraction: float = 1.0,
) -> CheckResult:
    """Compare analytic and central-difference gradients of ``loss_fn``.

    ``loss_fn`` must rebuild the graph from the current ``.data`` of
    ``params`` on every call and be deterministic (re-seed any Rng inside).
    """
    for p in params:
        p.zero_grad()
        p.requires_grad = True
    loss = loss_fn()
    ag.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    checked = kinks = 0
    failures: list[str] = []
    for p, grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            with ag.no_grad(), ag.record_kinks() as plus_log:
                flat[i] = original + step
                f_plus = loss_fn().item()
            with ag.no_grad(), ag.record_kinks() as minus_log:
                flat[i] = original - step
                f_minus = loss_fn().item()
            flat[i] = original
            if not _same_branches(plus_log, minus_log):
                kinks += 1
                continue
            numeric = (f_plus - f_minus) / (2 * step)
            err = float(relative_error(gflat[i], numeric))
            checked += 1
            worst = max(worst, err)
            if err > tolerance:
                failures.append(f"{p.name or 'input'}[{i}]: analytic={gflat[i]:.6e} numeric={numeric:.6e}")
    return CheckResult(op, worst, tolerance, checked, kinks, failures, min_pass_fraction)


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _projected(out: Tensor, rng: Rng) -> Tensor:
    return (out * Tensor(rng.normal(shape=out.shape))).sum()


def _leaf(rng: Rng, *shape, name: str) -> Tensor:
    return Tensor(rng.normal(shape=shape), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------


def check_matmul(seed: int = 0) -> CheckResult:
    rng = Rng(seed)
    a, b = _leaf(rng, 4, 5, name="a"), _leaf(rng, 5, 3, name="b")
    return check_gradients("matmul", lambda: _projected(ag.matmul(a, b), Rng(seed + 1)), [a, b], SMOOTH_TOL)


def check_conv1d(seed: int = 0) -> CheckResult:
    rng = Rng(seed)
    x, w, b = _leaf(rng, 2, 3, 20, name="x"), _leaf(rng, 4, 3, 5, name="w"), _leaf(rng, 4, name="bias")
    return check_gradients(
        "conv1d", lambda: _projected(ag.conv1d(x, w, b, stride=2), Rng(seed + 1)), [x, w, b], SMOOTH_TOL
    )


def check_maxpool1d(seed: int = 0) -> CheckResult:
    rng = Rng(seed)
    x = _leaf(rng, 2, 2, 17, name="x")
    return check_gradients(
        "maxpool1d", lambda: _projected(ag.maxpool1d(x, 2, 2), Rng(seed + 1)), [x], PIECEWISE_TOL
    )


def check_dense(seed: int = 0) -> CheckResult:
    rng = Rng(seed)
    x, w, b = _leaf(rng, 3, 4, name="x"), _leaf(rng, 4, 2, name="w"), _leaf(rng, 2, name="b")
    return check_gradients("dense", lambda: _projected(ag.dense(x, w, b), Rng(seed + 1)), [x, w, b], SMOOTH_TOL)


def check_relu(seed: int = 0) -> CheckResult:
    x = _leaf(Rng(seed), 3, 7, name="x")
    return check_gradients("relu", lambda: _projected(ag.relu(x), Rng(seed + 1)), [x], PIECEWISE_TOL)


def check_sigmoid(seed: int = 0) -> CheckResult:
    x = _leaf(Rng(seed), 3, 7, name="x")
    return check_gradients("sigmoid", lambda: _projected(ag.sigmoid(x), Rng(seed + 1)), [x], SMOOTH_TOL)


def check_softmax(seed: int = 0) -> CheckResult:
    x = _leaf(Rng(seed), 2, 5, name="x")
    return check_gradients(
        "softmax_lastdim", lambda: _projected(ag.softmax_lastdim(x), Rng(seed + 1)), [x], SMOOTH_TOL
    )


def check_layer_norm(seed: int = 0) -> CheckResult:
    rng = Rng(seed)
    x = _leaf(rng, 2, 6, name="x")
    gamma = Tensor(1.0 + 0.1 * rng.normal(shape=6), name="gamma")
    beta = _leaf(rng, 6, name="beta")
    return check_gradients(
        "layer_norm",
        lambda: _projected(ag.layer_norm(x, gamma, beta), Rng(seed + 1)),
        [x, gamma, beta],
        SMOOTH_TOL,
    )


def check_dropout(seed: int = 0) -> CheckResult:
    x = _leaf(Rng(seed), 4, 6, name="x")
    return check_gradients(
        "dropout",
        lambda: _projected(ag.dropout(x, 0.5, Rng(seed + 2), training=True), Rng(seed + 1)),
        [x],
        SMOOTH_TOL,
    )


def check_attention(seed: int = 0) -> CheckResult:
    from .model import attention

    rng = Rng(seed)
    q, k, v = (_leaf(rng, 3, 4, name=n) for n in ("Q", "K", "V"))
    return check_gradients("attention", lambda: _projected(attention(q, k, v), Rng(seed + 1)), [q, k, v], SMOOTH_TOL)


def check_model(seed: int = 0) -> CheckResult:
    """Whole network at the reduced config, dropout active with a frozen mask."""
    from .model import ModelConfig, forward, init_params

    config = ModelConfig.reduced()
    params = init_params(config, Rng(seed))
    rng = Rng(seed + 1)
    x = Tensor(rng.normal(shape=(2, 1, config.window_len)))
    y = np.array([0.0, 1.0])

    def loss_fn():
        p = forward(params, x, Rng(seed + 2), training=True)
        # plain BCE keeps this suite independent of the training module
        yt = Tensor(y)
        return -(yt * p.log() + (1.0 - yt) * (1.0 - p).log()).mean()

    return check_gradients(
        "model(reduced)", loss_fn, list(params.values()), PIECEWISE_TOL, min_pass_fraction=0.99
    )


PRIMITIVE_SUITES: dict[str, Callable[[], CheckResult]] = {
    "matmul": check_matmul,
    "conv1d": check_conv1d,
    "maxpool1d": check_maxpool1d,
    "dense": check_dense,
    "relu": check_relu,
    "sigmoid": check_sigmoid,
    "softmax_lastdim": check_softmax,
    "layer_norm": check_layer_norm,
    "dropout": check_dropout,
    "attention": check_attention,
}


def run_all(include_model: bool = True) -> list[CheckResult]:
    results = []
    for name, suite in PRIMITIVE_SUITES.items():
        results.append(suite())
        logger.info(results[-1].line())
    if include_model:
        results.append(check_model())
        logger.info(results[-1].line())
    return results
