# Copyright (c) 2025 Michael Litvin
# Licensed under AGPL-3.0-or-later - see LICENSE file for details
"""Finite-difference verification of every layer and of a tiny full network.

Each check builds a small random instance (dims <= 6), runs one taped forward
pass into an MSE against a random target, back-propagates, and compares every
gradient element with a central difference (h = 1e-5).
"""
import dataclasses
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Union

import numpy as np

from shared.dataset import seed_entropy
from shared.errors import NumericError
from shared.model import ConvSpec, ModelConfig, build
from shared.tensor_engine import (Node, Tape, affine, backward, conv2d, maxpool2d, mse_loss,
                                  relu, sigmoid)

logger = logging.getLogger(__name__)

STEP = 1e-5
TOLERANCE = 1e-4
# Below this magnitude both gradients count as zero
MAGNITUDE_FLOOR = 1e-6
DEFAULT_SEEDS = 20

TINY_MODELS = {
    'fcnn': ModelConfig(variant='fcnn', backbone=(6,), head=(4,), zero_init_output=False),
    'cnn': ModelConfig(variant='cnn', conv=(ConvSpec(2, 3, 1, 1, 2),), dense=(5,), head=(3,),
                       zero_init_output=False),
}


@dataclass(frozen=True)
class CheckResult:
    name: str
    seed: int
    max_rel_err: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOLERANCE


def numerical_gradient(f: Callable[[], Union[float, np.ndarray]], x: np.ndarray,
                       h: float = STEP) -> np.ndarray:
    """Central differences of f() with respect to every element of x (perturbed in place).

    f may return a vector of outputs; its shape is then appended to x.shape.
    """
    flat = x.reshape(-1)
    columns = []
    for j in range(flat.size):
        original = flat[j]
        flat[j] = original + h
        f_plus = np.asarray(f(), dtype=np.float64)
        flat[j] = original - h
        f_minus = np.asarray(f(), dtype=np.float64)
        flat[j] = original
        columns.append((f_plus - f_minus) / (2 * h))
    if not columns:
        return np.zeros_like(x)
    return np.stack(columns).reshape(*x.shape, *columns[0].shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), MAGNITUDE_FLOOR)
    return np.abs(analytic - numeric) / scale


def _check_inputs(name: str, seed: int, arrays: Dict[str, np.ndarray],
                  loss_fn: Callable[[Dict[str, Node]], Node], corrupt: bool) -> CheckResult:
    tape = Tape()
    nodes = {key: tape.leaf(value) for key, value in arrays.items()}
    backward(tape, loss_fn(nodes))

    def f() -> float:
        return float(loss_fn({key: Node(value) for key, value in arrays.items()}).value)

    worst = 0.0
    for key, value in arrays.items():
        analytic = nodes[key].grad if nodes[key].grad is not None else np.zeros_like(value)
        if corrupt:
            analytic = analytic * 1.01 + 1e-3
        worst = max(worst, float(relative_error(analytic, numerical_gradient(f, value)).max()))
    return CheckResult(name, seed, worst)


def check_layers(seed: int, corrupt: bool = False) -> List[CheckResult]:
    rng = np.random.default_rng(seed_entropy(seed))
    results = []

    n, i, o = rng.integers(1, 7, size=3)
    target = rng.normal(size=(n, o))
    results.append(_check_inputs('affine', seed, {
        'x': rng.normal(size=(n, i)), 'w': rng.normal(size=(i, o)), 'b': rng.normal(size=o)},
        lambda v: mse_loss(affine(v['x'], v['w'], v['b']), target), corrupt))

    stride, padding = (1, 0) if seed % 2 == 0 else (2, 1)
    x = rng.uniform(-1, 1, size=(2, 2, 5, 5))
    k = rng.uniform(-1, 1, size=(3, 2, 3, 3))
    out_extent = (5 + 2 * padding - 3) // stride + 1
    target = rng.normal(size=(2, 3, out_extent, out_extent))
    results.append(_check_inputs('conv2d', seed, {'x': x, 'k': k, 'b': rng.normal(size=3)},
                                 lambda v: mse_loss(conv2d(v['x'], v['k'], v['b'], stride, padding), target),
                                 corrupt))

    target = rng.normal(size=(2, 2, 2, 3))
    results.append(_check_inputs('maxpool2d', seed, {'x': rng.normal(size=(2, 2, 4, 6))},
                                 lambda v: mse_loss(maxpool2d(v['x'], 2), target), corrupt))

    x = rng.normal(size=(3, 4))
    x = np.sign(x) * (np.abs(x) + 0.1)  # keep clear of the kink
    target = rng.normal(size=(3, 4))
    results.append(_check_inputs('relu', seed, {'x': x}, lambda v: mse_loss(relu(v['x']), target), corrupt))

    target = rng.uniform(size=(3, 4))
    results.append(_check_inputs('sigmoid', seed, {'x': rng.normal(scale=2.0, size=(3, 4))},
                                 lambda v: mse_loss(sigmoid(v['x']), target), corrupt))

    target = rng.normal(size=(4, 2))
    results.append(_check_inputs('mse', seed, {'pred': rng.normal(size=(4, 2))},
                                 lambda v: mse_loss(v['pred'], target), corrupt))
    return results


def check_model(variant: str, seed: int, corrupt: bool = False) -> List[CheckResult]:
    """Both branch losses of a tiny network against every parameter.

    Biases are redrawn as nonzero values so no pre-activation sits exactly on
    the ReLU kink. Each perturbation is evaluated once for both branches.
    """
    rng = np.random.default_rng(seed_entropy(seed))
    network = build(dataclasses.replace(TINY_MODELS[variant], seed=seed))
    for param in network.params:
        if param.name.endswith('.b'):
            magnitude = rng.uniform(0.1, 0.5, size=param.value.shape)
            param.value[...] = magnitude * rng.choice((-1.0, 1.0), size=param.value.shape)
    x = rng.uniform(0.01, 1.0, size=(3, *network.input_shape))
    targets = (rng.uniform(0.0, 2.0, size=(3, 1)), rng.integers(0, 2, size=(3, 1)).astype(np.float64))

    analytic = []
    for branch, target in enumerate(targets):
        network.params.zero_grad()
        tape = Tape()
        backward(tape, mse_loss(network.forward(x, tape)[branch], target))
        analytic.append({param.name: param.grad.copy() for param in network.params})
    network.params.zero_grad()

    def losses() -> np.ndarray:
        return np.array([float(mse_loss(out, target).value)
                         for out, target in zip(network.forward(x), targets)])

    worst = [0.0, 0.0]
    for param in network.params:
        numeric = numerical_gradient(losses, param.value)
        for branch in (0, 1):
            grad = analytic[branch][param.name]
            if corrupt:
                grad = grad * 1.01 + 1e-3
            worst[branch] = max(worst[branch], float(relative_error(grad, numeric[..., branch]).max()))
    return [CheckResult(f"{variant}_{name}_branch", seed, err) for name, err in zip(('tc', 'cls'), worst)]


def run_suite(variant: str = 'fcnn', seeds: Iterable[int] = range(DEFAULT_SEEDS),
              corrupt: bool = False) -> Dict[str, float]:
    """Max relative error per check name over all seeds"""
    worst: Dict[str, float] = {}
    for seed in seeds:
        for result in check_layers(seed, corrupt) + check_model(variant, seed, corrupt):
            worst[result.name] = max(worst.get(result.name, 0.0), result.max_rel_err)
    logger.info(f"Gradient check ({variant}): max relative error {max(worst.values()):.3e}")
    return worst


class GradientCheckFailed(NumericError):
    category = 'gradcheck_failed'

    def __init__(self, failures: Dict[str, float]):
        detail = ', '.join(f"{name}={err:.3e}" for name, err in sorted(failures.items()))
        super().__init__(f"Relative gradient error >= {TOLERANCE:g}: {detail}")
        self.failures = failures


def verify(variant: str = 'fcnn', seeds: Iterable[int] = range(DEFAULT_SEEDS),
           corrupt: bool = False) -> Dict[str, float]:
    """run_suite() that raises GradientCheckFailed when any check reaches the tolerance"""
    worst = run_suite(variant, seeds, corrupt)
    failures = {name: err for name, err in worst.items() if not err < TOLERANCE}
    if failures:
        raise GradientCheckFailed(failures)
    return worst
