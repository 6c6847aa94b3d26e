"""Finite-difference verification of analytic gradients.

Every registered op is wrapped in a scalar loss (a fixed random projection of
its output, or the model's own loss for composites).  Analytic gradients from
:meth:`Tensor.backward` are compared against central differences with step
``h = 1e-5`` at 64-bit precision, using
``rel_err = |a - n| / max(|a|, |n|, 1e-8)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from relnet import ops
from relnet.tensor import Tensor, default_dtype

STEP = 1e-5
FLOOR = 1e-8

# builder(shapes, rng) -> (loss_fn, tensors to check)
Builder = Callable[[list | None, np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]
REGISTRY: dict[str, Builder] = {}


@dataclass
class GradCheckReport:
    op: str
    max_rel_err: float
    tolerance: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.op:<18} max_rel_err={self.max_rel_err:.3e} tol={self.tolerance:.0e} n={self.n_checked}"


def register(name: str):
    def deco(fn: Builder) -> Builder:
        REGISTRY[name] = fn
        return fn
    return deco


def _param(rng, shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _projected(out_fn: Callable[[], Tensor], shape, rng) -> Callable[[], Tensor]:
    proj = Tensor(rng.standard_normal(shape))
    return lambda: (out_fn() * proj).sum()


def check_gradients(loss_fn: Callable[[], Tensor], tensors: list[Tensor], h: float = STEP) -> tuple[float, int]:
    """Return (max relative error, number of entries checked)."""
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    worst = 0.0
    count = 0
    for t, a in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            num = (up - down) / (2 * h)
            ana = a.reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana), abs(num), FLOOR)
            worst = max(worst, err)
            count += 1
    return worst, count


def grad_check(opname: str, shapes: list | None = None, tolerance: float = 1e-4, seed: int = 0) -> GradCheckReport:
    """Check one registered op on seeded random inputs at 64-bit precision."""
    if opname not in REGISTRY:
        raise KeyError(f"unknown op {opname!r}; registered: {', '.join(sorted(REGISTRY))}")
    with default_dtype(np.float64):
        rng = np.random.default_rng(seed)
        loss_fn, tensors = REGISTRY[opname](shapes, rng)
        worst, count = check_gradients(loss_fn, tensors)
    return GradCheckReport(opname, float(worst), tolerance, count)


def run_all(tolerance: float = 1e-4, seed: int = 0) -> list[GradCheckReport]:
    return [grad_check(name, None, tolerance, seed) for name in REGISTRY]


# -- registered ops -----------------------------------------------------------


@register("conv2d")
def _conv(shapes, rng):
    (xs, ws) = shapes or ([2, 3, 8, 8], [4, 3, 3, 3])
    x, w, b = _param(rng, xs), _param(rng, ws, 0.3), _param(rng, (ws[0],))
    pad = 1
    out_shape = ops.conv2d(x, w, b, padding=pad).shape
    return _projected(lambda: ops.conv2d(x, w, b, padding=pad), out_shape, rng), [x, w, b]


@register("conv2d_valid")
def _conv_valid(shapes, rng):
    (xs, ws) = shapes or ([2, 3, 7, 7], [2, 3, 3, 3])
    x, w = _param(rng, xs), _param(rng, ws, 0.3)
    out_shape = ops.conv2d(x, w).shape
    return _projected(lambda: ops.conv2d(x, w), out_shape, rng), [x, w]


@register("paired_conv2d")
def _paired(shapes, rng):
    (cs, qs) = shapes or ([2, 2, 4, 4], [3, 3, 4, 4])
    a, b = _param(rng, cs), _param(rng, qs)
    w = _param(rng, (2, cs[1] + qs[1], 3, 3), 0.3)
    out_shape = ops.paired_conv2d(a, b, w, padding=1).shape
    return _projected(lambda: ops.paired_conv2d(a, b, w, padding=1), out_shape, rng), [a, b, w]


@register("maxpool2d")
def _pool(shapes, rng):
    xs = (shapes or [[2, 3, 7, 6]])[0]
    # distinct values keep every window's argmax well separated from its runner-up
    x = Tensor(rng.permutation(int(np.prod(xs))).reshape(xs) * 0.01, requires_grad=True)
    out_shape = ops.maxpool2d(x).shape
    return _projected(lambda: ops.maxpool2d(x), out_shape, rng), [x]


@register("batchnorm2d")
def _bn(shapes, rng):
    xs = (shapes or [[3, 2, 3, 3]])[0]
    c = xs[1]
    x, gamma, beta = _param(rng, xs), _param(rng, (c,)), _param(rng, (c,))

    def out():
        return ops.batchnorm2d(x, gamma, beta, np.zeros(c), np.ones(c), mode="train")

    return _projected(out, xs, rng), [x, gamma, beta]


@register("batchnorm2d_eval")
def _bn_eval(shapes, rng):
    xs = (shapes or [[3, 2, 3, 3]])[0]
    c = xs[1]
    x, gamma, beta = _param(rng, xs), _param(rng, (c,)), _param(rng, (c,))
    rm, rv = rng.standard_normal(c), rng.uniform(0.5, 2.0, c)
    return _projected(lambda: ops.batchnorm2d(x, gamma, beta, rm, rv, mode="eval"), xs, rng), [x, gamma, beta]


@register("linear")
def _linear(shapes, rng):
    (xs, ws) = shapes or ([4, 5], [3, 5])
    x, w, b = _param(rng, xs), _param(rng, ws), _param(rng, (ws[0],))
    return _projected(lambda: ops.linear(x, w, b), (xs[0], ws[0]), rng), [x, w, b]


@register("relu")
def _relu(shapes, rng):
    xs = (shapes or [[4, 6]])[0]
    # keep inputs away from the kink so central differences are valid
    x = Tensor(np.sign(rng.standard_normal(xs)) * rng.uniform(0.1, 2.0, xs), requires_grad=True)
    return _projected(lambda: ops.relu(x), xs, rng), [x]


@register("sigmoid")
def _sigmoid(shapes, rng):
    xs = (shapes or [[4, 6]])[0]
    x = _param(rng, xs, 2.0)
    return _projected(lambda: ops.sigmoid(x), xs, rng), [x]


@register("concat_depth")
def _concat(shapes, rng):
    (a_s, b_s) = shapes or ([2, 3, 4, 4], [2, 2, 4, 4])
    a, b = _param(rng, a_s), _param(rng, b_s)
    out_shape = (a_s[0], a_s[1] + b_s[1], a_s[2], a_s[3])
    return _projected(lambda: ops.concat_depth(a, b), out_shape, rng), [a, b]


@register("sum_elementwise")
def _sum(shapes, rng):
    xs = (shapes or [[2, 3, 3]])[0]
    ts = [_param(rng, xs) for _ in range(3)]
    return _projected(lambda: ops.sum_elementwise(ts), xs, rng), ts


@register("mse_loss")
def _mse(shapes, rng):
    xs = (shapes or [[3, 5]])[0]
    pred = _param(rng, xs)
    target = rng.standard_normal(xs)
    return (lambda: ops.mse_loss(pred, target)), [pred]


@register("take")
def _take(shapes, rng):
    xs = (shapes or [[3, 4]])[0]
    x = _param(rng, xs)
    idx = np.array([0, 2, 2, 1, 0])
    return _projected(lambda: x.take(idx), (len(idx),) + tuple(xs[1:]), rng), [x]


@register("matmul")
def _matmul(shapes, rng):
    (a_s, b_s) = shapes or ([3, 4], [4, 2])
    a, b = _param(rng, a_s), _param(rng, b_s)
    return _projected(lambda: a @ b, (a_s[0], b_s[1]), rng), [a, b]


def _toy_episode(rng, n_classes=2, shots=2, queries=1, size=8):
    from types import SimpleNamespace

    ids = [f"c{i}" for i in range(n_classes)]
    return SimpleNamespace(
        class_ids=ids,
        support_refs=[(c, k) for c in ids for k in range(shots)],
        support_labels=[c for c in ids for _ in range(shots)],
        support_images=rng.random((n_classes * shots, 1, size, size)),
        query_labels=[c for c in ids for _ in range(queries)],
        query_images=rng.random((n_classes * queries, 1, size, size)),
    )


def _composite(fused: bool):
    def build(shapes, rng):
        from relnet.model import ModelConfig, RelationNetwork, episode_loss

        # 8x8 inputs need padding 2 in the last relation block to keep a 1x1 map,
        # mirroring the 1x1 relation output of the 28x28 configuration
        cfg = ModelConfig(input_channels=1, input_size=8, channels=2, embed_paddings=(1, 1, 1, 1),
                          relation_paddings=(1, 2), relation_hidden=3, fused_pair_conv=fused)
        model = RelationNetwork(cfg, seed=int(rng.integers(1 << 30)), dtype=np.float64)
        for t in model.params.values():
            # non-trivial BN affine parameters exercise every gradient path
            if t.name.endswith(("gamma", "beta")):
                t.data[:] = rng.uniform(0.5, 1.5, t.shape) if t.name.endswith("gamma") else rng.uniform(-0.2, 0.2, t.shape)
        episode = _toy_episode(rng)
        return (lambda: episode_loss(model.score_episode(episode, mode="train"))), list(model.params.values())
    return build


register("relnet_composite")(_composite(fused=True))
register("relnet_composite_concat")(_composite(fused=False))


@register("zsl_composite")
def _zsl(shapes, rng):
    from relnet.model import ZslConfig, ZslRelationNetwork, episode_loss

    cfg = ZslConfig(attribute_dim=4, fc1_hidden=5, feature_dim=3, fc3_hidden=4)
    model = ZslRelationNetwork(cfg, seed=int(rng.integers(1 << 30)), dtype=np.float64)
    attrs = rng.random((3, 4))
    feats = rng.random((4, 3))
    labels = [0, 1, 2, 1]
    return (lambda: episode_loss(model.scores(attrs, feats, [0, 1, 2], labels))), list(model.params.values())
