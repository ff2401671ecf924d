"""Finite-difference checks over every differentiable primitive and a tiny
end-to-end model, shared by the ``gradcheck`` command and the test suite."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .config import ModelConfig, TrainConfig
from .model import build_model, final_classify, forward_train, run_stages
from .psn import bilstm_map, serialize_features
from .tensor_core import (
    GradcheckReport,
    LSTMParams,
    Tensor,
    avg_pool_rect,
    bilinear_resize,
    concat,
    conv2d,
    global_avg_pool,
    gradcheck,
    linear,
    lstm_cell,
    max_pool2d,
    no_grad,
    relu,
    sigmoid,
    softmax_cross_entropy,
    stack,
    tanh,
)

PRIMITIVE_TOL = 1e-4
GRAPH_TOL = 1e-3


@dataclass
class Check:
    name: str
    build: Callable[[np.random.Generator], tuple]  # rng -> (f, inputs, names)
    tol: float = PRIMITIVE_TOL


def _project(out: Tensor, rng) -> Tensor:
    """Scalarise with a fixed random weighting so every output entry matters."""
    r = Tensor(rng.normal(size=out.shape), dtype=np.float64)
    return (out * r).sum()


def _fixed(fn, *shapes):
    """Check ``fn(*inputs)`` scalarised by a projection fixed at build time."""

    def build(rng):
        inputs = [rng.normal(size=s) for s in shapes]
        seed = int(rng.integers(1 << 31))
        return (lambda *xs: _project(fn(*xs), np.random.default_rng(seed))), inputs, [f"x{i}" for i in range(len(shapes))]

    return build


def _lstm(rng):
    d, h, b = 3, 4, 2
    params = LSTMParams(
        w_x=Tensor(rng.normal(0, 0.5, (d, 4 * h)), requires_grad=True, dtype=np.float64),
        w_h=Tensor(rng.normal(0, 0.5, (h, 4 * h)), requires_grad=True, dtype=np.float64),
        b=Tensor(rng.normal(0, 0.5, 4 * h), requires_grad=True, dtype=np.float64),
    )
    seed = int(rng.integers(1 << 31))

    def f(x, h0, c0, wx, wh, bias):
        h1, c1 = lstm_cell(x, h0, c0, params)
        return _project(concat([h1, c1], axis=1), np.random.default_rng(seed))

    inputs = [rng.normal(size=(b, d)), rng.normal(size=(b, h)), rng.normal(size=(b, h)), params.w_x, params.w_h, params.b]
    return f, inputs, ["x", "h", "c", "w_x", "w_h", "b"]


def _bilstm(rng):
    from .psn import PsnModel

    psn = PsnModel.init((4,), (), seq_len=4, hidden=4, num_classes=3, rng=rng, image_hw=(2, 8), dtype=np.float64)
    lstm = {k: v for k, v in psn.part_params("psn").items() if ".lstm_" in k}
    seed = int(rng.integers(1 << 31))

    def f(x, *_):
        return _project(bilstm_map(serialize_features(x, 4), psn), np.random.default_rng(seed))

    return f, [rng.normal(size=(2, 4, 2, 8)), *lstm.values()], ["x", *lstm]


def _ce(rng):
    labels = rng.integers(0, 5, size=4)
    return (lambda z: softmax_cross_entropy(z, labels)), [rng.normal(0, 2, (4, 5))], ["logits"]


def tiny_model_config() -> ModelConfig:
    return ModelConfig(channels=(4, 6), pool_after=(0,), seq_len=4, hidden=4, crop_size=16, head_init="normal")


def _full_graph(rng, stages: int = 1):
    cfg = tiny_model_config()
    cfg.stages = stages
    model = build_model(cfg, num_classes=3, image_size=16, seed=int(rng.integers(1 << 31)), dtype=np.float64)
    for name, p in model.named_parameters().items():
        if "head" in name and name.endswith("weight"):
            p.data = rng.normal(0.0, 0.5, p.shape)
    images = Tensor(rng.uniform(0, 1, (2, 3, 16, 16)), dtype=np.float64)
    labels = np.array([0, 2])
    branch_cfg = TrainConfig(final_head_mode="post")  # branch losses only
    params = model.named_parameters()
    # the joint descriptor is a constant to the tape, so the difference
    # quotient must see it frozen as well
    with no_grad():
        joint = Tensor(run_stages(images, model, labels=labels).joint.data, dtype=np.float64)

    def f(*_):
        final = softmax_cross_entropy(final_classify(joint, model), labels)
        return forward_train(images, labels, model, branch_cfg).loss + final

    return f, list(params.values()), list(params)


def registry() -> list[Check]:
    return [
        Check("add(broadcast)", _fixed(lambda a, b: a + b, (3, 4), (4,))),
        Check("sub", _fixed(lambda a, b: a - b, (3, 4), (3, 1))),
        Check("mul(broadcast)", _fixed(lambda a, b: a * b, (2, 3, 4), (3, 1))),
        Check("matmul", _fixed(lambda a, b: a @ b, (3, 5), (5, 2))),
        Check("sum(axis)", _fixed(lambda a: a.sum(axis=1) * a.sum(axis=1), (3, 4))),
        Check("mean", _fixed(lambda a: a.mean(axis=0) * 3.0, (4, 3))),
        Check("reshape+transpose", _fixed(lambda a: a.reshape(4, 6).transpose(1, 0), (2, 3, 4))),
        Check("getitem(slice)", _fixed(lambda a: a[1:, ::2], (3, 5))),
        Check("getitem(fancy)", _fixed(lambda a: a[np.array([0, 2, 0])], (3, 4))),
        Check("concat", _fixed(lambda a, b: concat([a, b], axis=1), (2, 3), (2, 2))),
        Check("stack", _fixed(lambda a, b: stack([a, b], axis=1), (2, 3), (2, 3))),
        Check("sigmoid", _fixed(sigmoid, (3, 4))),
        Check("tanh", _fixed(tanh, (3, 4))),
        Check("relu", _fixed(relu, (3, 4))),
        Check("conv2d(pad1)", _fixed(lambda x, w, b: conv2d(x, w, b, stride=1, pad=1), (2, 2, 5, 5), (3, 2, 3, 3), (3,))),
        Check("conv2d(stride2)", _fixed(lambda x, w, b: conv2d(x, w, b, stride=2, pad=0), (1, 2, 7, 6), (2, 2, 3, 3), (2,))),
        Check("max_pool2d", _fixed(lambda x: max_pool2d(x, 2), (2, 2, 6, 4))),
        Check("global_avg_pool(sum)", _fixed(lambda x: global_avg_pool(x, "sum"), (2, 3, 4, 5))),
        Check("global_avg_pool(mean)", _fixed(lambda x: global_avg_pool(x, "mean"), (2, 3, 4, 5))),
        Check("avg_pool_rect", _fixed(lambda x: avg_pool_rect(x, 4, 2), (2, 3, 4, 8))),
        Check("linear", _fixed(linear, (3, 5), (5, 4), (4,))),
        Check("softmax_cross_entropy", _ce),
        Check("bilinear_resize(up)", _fixed(lambda x: bilinear_resize(x, 7, 9), (1, 2, 4, 5))),
        Check("bilinear_resize(down)", _fixed(lambda x: bilinear_resize(x, 3, 2), (2, 1, 6, 5))),
        Check("lstm_cell", _lstm),
        Check("serialize+bilstm", _bilstm),
        Check("tiny REAPS graph", _full_graph, GRAPH_TOL),
        Check("tiny REAPS+ graph (2 stages)", lambda rng: _full_graph(rng, stages=2), GRAPH_TOL),
    ]


@dataclass
class CheckResult:
    name: str
    report: GradcheckReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed

    @property
    def worst(self) -> float:
        return self.report.worst


def run_checks(checks: list[Check] | None = None, seed: int = 0) -> list[CheckResult]:
    results = []
    for i, check in enumerate(checks or registry()):
        rng = np.random.default_rng([seed, i])
        f, inputs, names = check.build(rng)
        t0 = time.perf_counter()
        report = gradcheck(f, inputs, tol=check.tol, names=names)
        results.append(CheckResult(check.name, report, time.perf_counter() - t0))
    return results
