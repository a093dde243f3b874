"""Finite-difference verification of analytic gradients.

grad_check runs a scalar-valued closure twice: once on the tape for
analytic gradients, then with central differences per input component.
Verification runs in float64 with h=1e-5; float32 inputs fall back to
h=1e-3 which is the best a 32-bit difference quotient supports.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import GradTape, Tensor, backward

# Relative error floor: components where both gradients are below this are
# compared absolutely, so exact zeros don't produce spurious 0/0 failures.
_REL_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    rel_tol: float
    per_input: list[float] = field(default_factory=list)

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"grad_check {status}: max_rel_err={self.max_rel_err:.3e} (tol {self.rel_tol:.1e})"


def grad_check(
    op_closure: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    rel_tol: float = 1e-3,
    float64: bool = True,
) -> GradCheckReport:
    """Compare tape gradients of a scalar closure against central differences."""
    dtype = np.float64 if float64 else np.float32
    h = 1e-5 if dtype == np.float64 else 1e-3
    xs = [Tensor(t.data, dtype=dtype, requires_grad=True) for t in inputs]

    with GradTape() as tape:
        for x in xs:
            tape.watch(x)
        loss = op_closure(*xs)
        grads = backward(loss, tape=tape)
    analytic = [grads[x.node_id].numpy() for x in xs]

    def eval_loss(arrays):
        ts = [Tensor(a, dtype=dtype) for a in arrays]
        return op_closure(*ts).item()

    max_rel = 0.0
    per_input = []
    base = [x.data.copy() for x in xs]
    for i, a in enumerate(analytic):
        worst = 0.0
        flat = base[i].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = eval_loss(base)
            flat[j] = orig - h
            fm = eval_loss(base)
            flat[j] = orig
            numeric = (fp - fm) / (2 * h)
            ga = float(a.reshape(-1)[j])
            denom = max(abs(ga), abs(numeric), _REL_FLOOR)
            worst = max(worst, abs(ga - numeric) / denom)
        per_input.append(worst)
        max_rel = max(max_rel, worst)

    return GradCheckReport(max_rel_err=max_rel, passed=max_rel <= rel_tol, rel_tol=rel_tol, per_input=per_input)


def _rng_tensors(seed: int, *shapes, lo=-1.0, hi=1.0, avoid_kink: float = 0.0):
    rng = np.random.default_rng(seed)
    out = []
    for s in shapes:
        a = rng.uniform(lo, hi, size=s)
        if avoid_kink:
            # push values away from 0 so relu/abs finite differences do not
            # straddle the kink
            a = np.where(np.abs(a) < avoid_kink, np.sign(a) * avoid_kink + a, a)
        out.append(Tensor(a, dtype=np.float64))
    return out


def standard_checks() -> dict[str, Callable[[int], GradCheckReport]]:
    """Named per-op checks, each a function of a seed, for the verification CLI."""
    from . import ops

    def mk(fn):
        return fn

    checks: dict[str, Callable[[int], GradCheckReport]] = {}

    checks["matmul"] = mk(lambda seed: grad_check(
        lambda a, b: ops.sum_(ops.matmul(a, b)), _rng_tensors(seed, (4, 5), (5, 3))))
    checks["matmul_batched"] = mk(lambda seed: grad_check(
        lambda a, b: ops.sum_(ops.matmul(a, b)), _rng_tensors(seed, (2, 3, 4), (2, 4, 3))))
    checks["add"] = mk(lambda seed: grad_check(
        lambda a, b: ops.sum_(ops.add(a, b)), _rng_tensors(seed, (3, 4), (4,))))
    checks["sub"] = mk(lambda seed: grad_check(
        lambda a, b: ops.sum_(ops.mul(ops.sub(a, b), ops.sub(a, b))), _rng_tensors(seed, (3, 4), (3, 4))))
    checks["mul"] = mk(lambda seed: grad_check(
        lambda a, b: ops.sum_(ops.mul(a, b)), _rng_tensors(seed, (5,), (5,))))
    checks["div"] = mk(lambda seed: grad_check(
        lambda a, b: ops.sum_(ops.div(a, b)), _rng_tensors(seed, (4,), (4,), lo=0.5, hi=2.0)))
    checks["softmax"] = mk(lambda seed: grad_check(
        lambda a, w: ops.sum_(ops.mul(ops.softmax(a, axis=-1), w)), _rng_tensors(seed, (3, 6), (3, 6))))
    checks["layer_norm"] = mk(lambda seed: grad_check(
        lambda a, g, b, w: ops.sum_(ops.mul(ops.layer_norm(a, g, b), w)),
        _rng_tensors(seed, (3, 6), (6,), (6,), (3, 6))))
    checks["conv2d"] = mk(lambda seed: grad_check(
        lambda x, w, b: ops.sum_(ops.conv2d(x, w, b, stride=1, padding=1)),
        _rng_tensors(seed, (2, 5, 5), (3, 2, 3, 3), (3,))))
    checks["conv2d_strided"] = mk(lambda seed: grad_check(
        lambda x, w, b: ops.sum_(ops.absval(ops.conv2d(x, w, b, stride=2, padding=1))),
        _rng_tensors(seed, (2, 6, 6), (3, 2, 4, 4), (3,), avoid_kink=0.05)))
    for kind in ("relu", "gelu", "tanh", "sigmoid"):
        checks[kind] = mk(lambda seed, k=kind: grad_check(
            lambda a, w: ops.sum_(ops.mul(ops.activation(a, k), w)),
            _rng_tensors(seed, (4, 4), (4, 4), avoid_kink=0.05)))
    checks["abs"] = mk(lambda seed: grad_check(
        lambda a: ops.sum_(ops.absval(a)), _rng_tensors(seed, (4, 4), avoid_kink=0.05)))
    checks["mean"] = mk(lambda seed: grad_check(
        lambda a: ops.mean(ops.mul(a, a)), _rng_tensors(seed, (3, 5))))
    checks["concat"] = mk(lambda seed: grad_check(
        lambda a, b: ops.sum_(ops.mul(ops.concat([a, b], axis=1), ops.concat([a, b], axis=1))),
        _rng_tensors(seed, (2, 3), (2, 4))))
    checks["narrow"] = mk(lambda seed: grad_check(
        lambda a: ops.sum_(ops.mul(ops.narrow(a, 0, 1, 2), ops.narrow(a, 0, 1, 2))),
        _rng_tensors(seed, (4, 3))))
    checks["transpose"] = mk(lambda seed: grad_check(
        lambda a, b: ops.sum_(ops.mul(ops.transpose(a), b)), _rng_tensors(seed, (3, 4), (4, 3))))
    checks["reshape"] = mk(lambda seed: grad_check(
        lambda a: ops.sum_(ops.mul(ops.reshape(a, (6,)), ops.reshape(a, (6,)))),
        _rng_tensors(seed, (2, 3))))
    checks["upsample2x"] = mk(lambda seed: grad_check(
        lambda a, w: ops.sum_(ops.mul(ops.upsample2x(a), w)),
        _rng_tensors(seed, (2, 3, 3), (2, 6, 6))))
    return checks
