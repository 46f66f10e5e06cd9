"""Finite-difference verification of every differentiable op and of the full loss."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .geometry import Box, assign_targets
from .model import ModelConfig, build_model

OP_TOL = 1e-5
END_TO_END_TOL = 1e-4
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    cases: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error < self.tolerance


@dataclass
class GradcheckReport:
    results: list[CheckResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def max_error(self) -> float:
        return max((r.max_rel_error for r in self.results), default=0.0)

    def failures(self) -> list[CheckResult]:
        return [r for r in self.results if not r.passed]

    def table(self) -> str:
        lines = [f"{'check':<24}{'cases':>6}{'max rel err':>14}{'tol':>9}  result"]
        for r in self.results:
            lines.append(
                f"{r.name:<24}{r.cases:>6}{r.max_rel_error:>14.3e}{r.tolerance:>9.0e}  {'PASS' if r.passed else 'FAIL'}"
            )
        lines.append(f"{'overall':<24}{'':>6}{self.max_error:>14.3e}{'':>9}  {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "max_rel_error": self.max_error,
            "seconds": self.seconds,
            "checks": [
                {"name": r.name, "cases": r.cases, "max_rel_error": r.max_rel_error,
                 "tolerance": r.tolerance, "passed": r.passed}
                for r in self.results
            ],
        }


# Each case maps an input tensor to a tensor output. Ops are looked up on the
# module at call time so a patched op is the one under test.
ELEMENTWISE_SHAPES = [(3, 4), (2, 3, 5), (4, 1, 3), (5, 2), (2, 2, 2, 3)]


def _elementwise_ops() -> dict[str, Callable[[T.Tensor, np.ndarray], T.Tensor]]:
    return {
        "add": lambda x, c: T.add(x, T.Tensor(c)),
        "sub": lambda x, c: T.sub(T.Tensor(c), x),
        "mul": lambda x, c: T.mul(x, T.mul(x, c)),
        "div": lambda x, c: T.div(x, 3.0),
        "square": lambda x, c: T.square(x),
        "sum": lambda x, c: T.tsum(T.mul(x, c)),
        "mean": lambda x, c: T.mean(T.mul(x, c)),
        "reshape": lambda x, c: T.reshape(x, (-1,)),
        "take": lambda x, c: T.take(x, (slice(1, None),)),
        "leaky_relu": lambda x, c: T.leaky_relu(x, 0.1),
        "relu": lambda x, c: T.relu(x),
        "softmax": lambda x, c: T.softmax(x, axis=0),
        "smooth_l1": lambda x, c: T.smooth_l1(T.mul(x, 1.7)),
        "clamped_log": lambda x, c: T.clamped_log(T.add(T.square(x), 0.5)),
    }


CONV_CASES = [
    ((2, 3, 6, 6), T.ConvSpec((3, 3, 3), (1, 1, 1), (1, 1, 1), 2)),
    ((3, 4, 8, 8), T.ConvSpec((3, 5, 5), (1, 2, 2), (1, 2, 2), 2)),
    ((2, 4, 4, 5), T.ConvSpec((3, 3, 3), (2, 1, 1), (1, 1, 1), 3)),
    ((2, 2, 7, 6), T.ConvSpec((5, 5), (2, 2), (2, 2), 3)),
    ((1, 3, 5, 5), T.ConvSpec((3, 3), (1, 1), (1, 1), 2)),
]


def _probe_error(fn: Callable[..., T.Tensor], inputs: Sequence[T.Tensor], rng: np.random.Generator, h: float) -> float:
    """Backprop <fn(inputs), r> for a random r and compare with central differences for every input."""
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()
    out = fn(*inputs)
    probe = rng.normal(size=out.shape)
    T.backprop(T.tsum(T.mul(out, probe)))
    worst = 0.0
    for k, t in enumerate(inputs):

        def f(v, k=k):
            args = list(inputs)
            args[k] = v
            return T.tsum(T.mul(fn(*args), probe))

        numeric = T.finite_difference_gradient(f, t, h)
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        worst = max(worst, T.relative_error(analytic, numeric))
    return worst


def check_ops(rng: np.random.Generator, h: float = STEP, tol: float = OP_TOL) -> list[CheckResult]:
    results = []
    for name, op in _elementwise_ops().items():
        worst = 0.0
        for shape in ELEMENTWISE_SHAPES:
            c = rng.normal(size=shape)
            x = T.Tensor(rng.normal(size=shape))
            worst = max(worst, _probe_error(lambda v: op(v, c), [x], rng, h))
        results.append(CheckResult(name, worst, tol, len(ELEMENTWISE_SHAPES)))

    worst_c = worst_t = 0.0
    for in_shape, spec in CONV_CASES:
        cout, cin = spec.out_channels, in_shape[0]
        w = T.Tensor(rng.normal(size=(cout, cin) + spec.kernel))
        x = T.Tensor(rng.normal(size=in_shape))
        b = T.Tensor(rng.normal(size=cout))
        worst_c = max(worst_c, _probe_error(lambda xx, ww, bb: T.conv3d(xx, ww, bb, spec), [x, w, b], rng, h))
        with T.no_grad():
            y_shape = T.conv3d(x, w, None, spec).shape
        y = T.Tensor(rng.normal(size=y_shape))
        bt = T.Tensor(rng.normal(size=cin))
        worst_t = max(
            worst_t,
            _probe_error(lambda yy, ww, bb: T.transposed_conv3d(yy, ww, spec, in_shape, bias=bb), [y, w, bt], rng, h),
        )
    results.append(CheckResult("conv3d", worst_c, tol, len(CONV_CASES)))
    results.append(CheckResult("transposed_conv3d", worst_t, tol, len(CONV_CASES)))
    return results


def tiny_config(variant: str) -> ModelConfig:
    return ModelConfig(
        variant=variant, channels=2, timesteps=8, image_h=64, image_w=128,
        filter_counts=(2, 3, 2, 3, 2, 3), num_classes=3,
    )


def check_end_to_end(
    variant: str, seed: int = 0, samples_per_tensor: int = 4, h: float = STEP, tol: float = END_TO_END_TOL,
    mode: str = "semi",
) -> CheckResult:
    """Gradient of the total loss against every parameter tensor of a tiny model.

    ``samples_per_tensor`` flat positions are probed per tensor (all of them
    for tensors that small).
    """
    from .training import TrainConfig, compute_loss

    cfg = tiny_config(variant)
    params = build_model(cfg, seed)
    rng = np.random.default_rng([seed, 17])
    # small nonzero biases so no term sits exactly at its init value
    for name, t in params.items():
        if name.endswith(".b"):
            t.data += 0.05 * rng.normal(size=t.shape)
    x = T.Tensor(rng.normal(size=cfg.input_shape))
    boxes = [Box(40.0, 30.0, 50.0, 36.0, 1, 0), Box(90.0, 20.0, 30.0, 30.0, 2, 2), Box(100.0, 40.0, 70.0, 20.0, 0, 4)]
    target = assign_targets(boxes, cfg.grid, cfg.labeled_frames, cfg.num_classes)
    train_cfg = TrainConfig(dataset="", out_dir="", mode=mode, lam=1.0)

    params.zero_grad()
    T.backprop(compute_loss(params, x, target, train_cfg).total)
    worst = 0.0
    for name, t in params.items():
        n = t.size
        idx = range(n) if n <= samples_per_tensor else rng.choice(n, samples_per_tensor, replace=False)
        idx = [int(i) for i in idx]
        numeric = T.finite_difference_gradient(lambda v: compute_loss(params, x, target, train_cfg).total, t, h, idx)
        analytic = (t.grad if t.grad is not None else np.zeros(t.shape)).reshape(-1)[idx]
        worst = max(worst, T.relative_error(analytic, numeric.reshape(-1)[idx]))
    return CheckResult(f"total_loss[{variant},{mode}]", worst, tol, len(params.tensors))


def run_gradcheck(
    seed: int = 0, samples_per_tensor: int = 4, variants: Sequence[str] = ("3d", "2d"), h: float = STEP
) -> GradcheckReport:
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    report = GradcheckReport(check_ops(rng, h))
    for v in variants:
        report.results.append(check_end_to_end(v, seed, samples_per_tensor, h))
    report.results.append(check_end_to_end("2d", seed, samples_per_tensor, h, mode="supervised"))
    report.seconds = time.perf_counter() - start
    return report
