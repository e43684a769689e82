"""Finite-difference checks for every registered op and for the full model loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import CvFormer, ModelConfig
from .training import ContrastiveConfig, combined_loss, init_head

OP_TOL = 1e-5
MODEL_TOL = 1e-4
POINTS = 5

Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


def _leaf(x) -> Tensor:
    return Tensor(x, requires_grad=True, dtype=np.float64)


def _readout(out_shape, rng) -> np.ndarray:
    # a random read-out weight keeps every output coordinate in play
    return rng.standard_normal(out_shape)


def _unary(op, low=-2.0, high=2.0, shape=(3, 4)) -> Case:
    def case(rng):
        x = _leaf(rng.uniform(low, high, size=shape))
        with ad.no_grad():
            w = _readout(op(x).shape, rng)
        return (lambda: ad.sum_all(ad.mul(op(x), w))), [x]
    return case


def _binary(op, shape_a=(3, 4), shape_b=(3, 4), positive_b=False) -> Case:
    def case(rng):
        a = _leaf(rng.standard_normal(shape_a))
        b_val = rng.uniform(0.5, 2.0, size=shape_b) if positive_b else rng.standard_normal(shape_b)
        b = _leaf(b_val)
        with ad.no_grad():
            w = _readout(op(a, b).shape, rng)
        return (lambda: ad.sum_all(ad.mul(op(a, b), w))), [a, b]
    return case


def _clamp_case(rng):
    # keep every coordinate at least 0.1 away from the kink
    x_val = rng.uniform(0.1, 1.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4))
    x = _leaf(x_val)
    w = rng.standard_normal((3, 4))
    return (lambda: ad.sum_all(ad.mul(ad.clamp_min(x, 0.0), w))), [x]


def _concat_case(rng):
    a, b = _leaf(rng.standard_normal((2, 3))), _leaf(rng.standard_normal((4, 3)))
    w = rng.standard_normal((6, 3))
    return (lambda: ad.sum_all(ad.mul(ad.concat([a, b], axis=0), w))), [a, b]


def _layer_norm_case(rng):
    x = _leaf(rng.standard_normal((3, 5)))
    g = _leaf(rng.uniform(0.5, 1.5, size=5))
    b = _leaf(rng.standard_normal(5))
    w = rng.standard_normal((3, 5))
    return (lambda: ad.sum_all(ad.mul(ad.layer_norm(x, g, b), w))), [x, g, b]


def _sum_all_case(rng):
    x = _leaf(rng.standard_normal((3, 4)))
    return (lambda: ad.sum_all(x)), [x]


OP_CASES: dict[str, Case] = {
    "add": _binary(ad.add, (2, 3, 4), (4,)),
    "sub": _binary(ad.sub, (3, 4), (1, 4)),
    "mul": _binary(ad.mul, (2, 3, 4), (3, 1)),
    "div": _binary(ad.div, (3, 4), (3, 4), positive_b=True),
    "scale": _unary(lambda x: ad.scale(x, -1.7)),
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, 0.5, 2.0),
    "sqrt": _unary(ad.sqrt, 0.5, 2.0),
    "clamp_min": _clamp_case,
    "gelu": _unary(ad.gelu, -3.0, 3.0),
    "matmul": _binary(ad.matmul, (2, 3, 4), (4, 5)),
    "transpose": _unary(lambda x: ad.transpose(x, (1, 2, 0)), shape=(2, 3, 4)),
    "reshape": _unary(lambda x: ad.reshape(x, (4, 3)), shape=(3, 4)),
    "concat": _concat_case,
    "take": _unary(lambda x: ad.take(x, (slice(1, 3), slice(None, None, 2))), shape=(4, 5)),
    "sum_all": _sum_all_case,
    "sum_axis": _unary(lambda x: ad.sum_axis(x, axis=1, keepdims=True), shape=(2, 3, 4)),
    "mean": _unary(lambda x: ad.mean(x, axis=0), shape=(3, 4)),
    "softmax_rows": _unary(ad.softmax_rows, -3.0, 3.0),
    "logsumexp_rows": _unary(ad.logsumexp_rows, -3.0, 3.0),
    "layer_norm": _layer_norm_case,
}

TOY_CONFIG = ModelConfig(M=8, P=4, d_model=8, num_heads=2, r=2, L=2, num_classes=2)
TOY_HEAD = ContrastiveConfig(tau=0.5, head_hidden=8, head_out=4)


def toy_model_case(rng: np.random.Generator, config: ModelConfig = TOY_CONFIG,
                   batch: int = 3, lam: float = 0.5):
    """Combined loss of a randomly re-weighted toy model on random views."""
    with ad.precision(np.float64):
        model = CvFormer(config, seed=int(rng.integers(1 << 31)))
        head = init_head(config.d_model, TOY_HEAD, rng)
    params = {**model.params, **head}
    for name, p in params.items():
        centre = 1.0 if name.endswith("_g") else 0.0
        p.data = centre + 0.3 * rng.standard_normal(p.shape)
    fcn = np.tanh(rng.standard_normal((batch, config.M, config.M)))
    fcn = 0.5 * (fcn + np.swapaxes(fcn, 1, 2))
    adjacency = (rng.random((batch, config.M, config.M)) > 0.7).astype(np.float64)
    adjacency = np.maximum(adjacency, np.swapaxes(adjacency, 1, 2))
    labels = rng.integers(0, config.num_classes, size=batch)

    def f():
        out = model(fcn, adjacency)
        return combined_loss(out.fused_probs, labels, out.embedding.cls_r, out.embedding.cls_c,
                             head, TOY_HEAD.tau, lam)

    return f, list(params.values())


@dataclass
class CheckResult:
    name: str
    worst: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def run_suite(points: int = POINTS, seed: int = 0, h: float = 1e-4,
              include_model: bool = True) -> list[CheckResult]:
    """Check every registered op at ``points`` random inputs, then the full loss.

    An op without a case is reported as failing (worst = inf).
    """
    rng = np.random.default_rng(seed)
    results = []
    with ad.precision(np.float64):
        for name in ad.registered_ops():
            case = OP_CASES.get(name)
            if case is None:
                results.append(CheckResult(name, float("inf"), OP_TOL))
                continue
            worst = max(ad.grad_check(*case(rng), h=h) for _ in range(points))
            results.append(CheckResult(name, worst, OP_TOL))
        if include_model:
            results.append(CheckResult("cvformer_loss", ad.grad_check(*toy_model_case(rng), h=h), MODEL_TOL))
    return results
