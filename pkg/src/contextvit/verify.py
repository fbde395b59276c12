"""Gradient verification suite: every op, then the full toy model per kind.

Used by the ``grad-check`` CLI command and the test suite.  Op checks
probe every differentiable primitive on small random shapes against
central finite differences; model checks run the complete conditioned
forward pass (16x16 images, patch 4, d=16, depth 2) for each context
kind.  Detached and EMA paths are frozen to recorded constants first,
so the oracle compares only the declared-differentiable subgraph.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .context import CONTEXT_KIND_NAMES, ContextKind, ContextViT, GroupedBatch
from .gradcheck import finite_diff_check
from .rng import child_seed, generator
from .tensor import Tensor
from .train import batch_cross_entropy
from .vit import ViTConfig

__all__ = ["op_gradient_checks", "toy_model_gradient_check", "run_gradient_suite", "TOLERANCE"]

TOLERANCE = 1e-4
STEP = 1e-4


def _rand(rng, *shape) -> np.ndarray:
    return rng.standard_normal(shape)


def _weighted(out: Tensor, coeff: np.ndarray) -> Tensor:
    """Random linear functional: a plain sum would hide axis-mixing errors
    (e.g. softmax rows always sum to one)."""
    return T.sum_axis(out * T.constant(coeff))


def op_gradient_checks(seed: int = 0) -> dict[str, float]:
    """Worst finite-difference relative error per differentiable op."""
    rng = generator(child_seed(seed, "opcheck"))
    dims = lambda *s: tuple(int(rng.integers(1, 8)) if d is None else d for d in s)
    errors: dict[str, float] = {}

    def check(name: str, make):
        params, f = make()
        errors[name] = finite_diff_check(f, params, step=STEP)

    def binary(op, positive_b: bool = False):
        def make():
            shape = dims(None, None)
            a = Tensor(_rand(rng, *shape), requires_grad=True)
            b_data = _rand(rng, *shape)
            if positive_b:
                b_data = np.abs(b_data) + 0.5
            b = Tensor(b_data, requires_grad=True)
            c = _rand(rng, *shape)
            return {"a": a, "b": b}, lambda: _weighted(op(a, b), c)

        return make

    def unary(op, positive: bool = False, shift: float = 0.0):
        def make():
            shape = dims(None, None)
            data = _rand(rng, *shape)
            if positive:
                data = np.abs(data) + 0.5
            a = Tensor(data + shift, requires_grad=True)
            c = _rand(rng, *shape)
            return {"a": a}, lambda: _weighted(op(a), c)

        return make

    check("add", binary(T.add))
    check("sub", binary(T.sub))
    check("mul", binary(T.mul))
    check("div", binary(T.div, positive_b=True))
    check("neg", unary(T.neg))
    check("pow_scalar", unary(lambda a: T.pow_scalar(a, 3.0), positive=True))
    check("exp", unary(T.exp))
    check("log", unary(T.log, positive=True))
    check("sqrt", unary(T.sqrt, positive=True))
    check("tanh", unary(T.tanh))
    check("relu", unary(T.relu, shift=0.3))  # keep coordinates off the kink
    check("gelu", unary(T.gelu))

    def make_matmul():
        m, k, n = dims(None, None, None)
        a = Tensor(_rand(rng, m, k), requires_grad=True)
        b = Tensor(_rand(rng, k, n), requires_grad=True)
        c = _rand(rng, m, n)
        return {"a": a, "b": b}, lambda: _weighted(T.matmul(a, b), c)

    check("matmul", make_matmul)

    def make_matmul_batched():
        bsz, m, k, n = dims(None, None, None, None)
        a = Tensor(_rand(rng, bsz, m, k), requires_grad=True)
        b = Tensor(_rand(rng, k, n), requires_grad=True)
        c = _rand(rng, bsz, m, n)
        return {"a": a, "b": b}, lambda: _weighted(T.matmul(a, b), c)

    check("matmul_batched", make_matmul_batched)

    def make_transpose():
        s = dims(None, None, None)
        a = Tensor(_rand(rng, *s), requires_grad=True)
        c = _rand(rng, s[2], s[0], s[1])
        return {"a": a}, lambda: _weighted(T.transpose(a, (2, 0, 1)), c)

    check("transpose", make_transpose)

    def make_reshape():
        m, n = dims(None, None)
        a = Tensor(_rand(rng, m, n), requires_grad=True)
        c = _rand(rng, m * n)
        return {"a": a}, lambda: _weighted(T.reshape(a, (m * n,)), c)

    check("reshape", make_reshape)

    def make_broadcast():
        b, n = dims(None, None)
        a = Tensor(_rand(rng, 1, n), requires_grad=True)
        c = _rand(rng, b, n)
        return {"a": a}, lambda: _weighted(T.broadcast_to(a, (b, n)), c)

    check("broadcast_to", make_broadcast)

    def make_concat():
        m1, m2, n = dims(None, None, None)
        a = Tensor(_rand(rng, m1, n), requires_grad=True)
        b = Tensor(_rand(rng, m2, n), requires_grad=True)
        c = _rand(rng, m1 + m2, n)
        return {"a": a, "b": b}, lambda: _weighted(T.concat([a, b], axis=0), c)

    check("concat", make_concat)

    def make_index_rows():
        m, n = dims(None, None)
        a = Tensor(_rand(rng, m, n), requires_grad=True)
        idx = rng.integers(0, m, size=m + 2)  # duplicates exercise accumulation
        c = _rand(rng, m + 2, n)
        return {"a": a}, lambda: _weighted(T.index_rows(a, idx), c)

    check("index_rows", make_index_rows)

    def make_select_columns():
        m, n = dims(None, None)
        a = Tensor(_rand(rng, m, n), requires_grad=True)
        idx = rng.integers(0, n, size=m)
        c = _rand(rng, m)
        return {"a": a}, lambda: _weighted(T.select_columns(a, idx), c)

    check("select_columns", make_select_columns)

    def make_getitem():
        m, n = dims(4, None)
        a = Tensor(_rand(rng, m, n), requires_grad=True)
        c = _rand(rng, 2, n)
        return {"a": a}, lambda: _weighted(a[1:3], c)

    check("getitem", make_getitem)

    def make_sum():
        s = dims(None, None, None)
        a = Tensor(_rand(rng, *s), requires_grad=True)
        c = _rand(rng, s[1])
        return {"a": a}, lambda: _weighted(T.sum_axis(a, axis=(0, 2)), c)

    check("sum_axis", make_sum)

    def make_mean():
        s = dims(None, None, None)
        a = Tensor(_rand(rng, *s), requires_grad=True)
        c = _rand(rng, s[2])
        return {"a": a}, lambda: _weighted(T.mean_axis(a, axis=(0, 1)), c)

    check("mean_axis", make_mean)

    def make_softmax():
        m, n = dims(None, None)
        a = Tensor(_rand(rng, m, n) * 3.0, requires_grad=True)
        c = _rand(rng, m, n)
        return {"a": a}, lambda: _weighted(T.softmax(a, axis=-1), c)

    check("softmax", make_softmax)

    def make_logsumexp():
        m, n = dims(None, None)
        a = Tensor(_rand(rng, m, n) * 3.0, requires_grad=True)
        c = _rand(rng, m)
        return {"a": a}, lambda: _weighted(T.logsumexp(a, axis=-1), c)

    check("logsumexp", make_logsumexp)

    def make_layer_norm():
        m, n = dims(None, 6)
        a = Tensor(_rand(rng, m, n), requires_grad=True)
        gain = Tensor(1.0 + 0.1 * _rand(rng, n), requires_grad=True)
        bias = Tensor(0.1 * _rand(rng, n), requires_grad=True)
        c = _rand(rng, m, n)
        return {"a": a, "gain": gain, "bias": bias}, lambda: _weighted(
            T.layer_norm(a, gain, bias, 1e-6), c
        )

    check("layer_norm", make_layer_norm)

    return errors


def _toy_setup(kind_name: str, seed: int):
    config = ViTConfig(
        image_h=16, image_w=16, channels=3, patch=4, dim=16, depth=2, heads=2, num_classes=3
    )
    kind = ContextKind.from_name(kind_name, patches=8)
    model = ContextViT.create(config, kind, seed=seed, group_ids=[0, 1])
    # nudge every trainable parameter off its init so zero-initialized heads
    # do not silence the paths under test
    for name, p in model.trainable_parameters().items():
        noise = generator(child_seed(seed, "nudge", name)).standard_normal(p.data.shape)
        p.data = p.data + 0.05 * noise
    if kind.base == "deep_sets":
        # relu pre-activations must sit clear of zero or the central
        # difference steps across the kink and disagrees with the mask
        for net in ("phi", "rho"):
            for bias in ("b1", "b2"):
                p = model.context[f"ctx_{net}.{bias}"]
                p.data = p.data + 0.5
    rng = generator(child_seed(seed, "toy_batch"))
    images = rng.uniform(0.0, 1.0, size=(6, 16, 16, 3))
    labels = rng.integers(0, 3, size=6)
    groups = np.array([0, 0, 0, 1, 1, 1])
    batch = GroupedBatch(images, labels, groups)
    return model, batch


def toy_model_gradient_check(kind_name: str, seed: int = 0, max_coords: Optional[int] = 4) -> float:
    """End-to-end FD check of cross-entropy through the full forward pass."""
    model, batch = _toy_setup(kind_name, seed)
    params = model.trainable_parameters()

    needs_freeze = model.kind.detach or model.kind.base == "ema"
    override = None
    if needs_freeze:
        captured: dict = {}
        with T.Tape():
            model.forward(batch, train=False, sample_seed=7, capture_context_inputs=captured)
        override = captured

    def f():
        _, logits = model.forward(
            batch, train=False, sample_seed=7, context_input_override=override
        )
        return batch_cross_entropy(logits, batch.labels)

    return finite_diff_check(f, params, step=STEP, max_coords=max_coords, seed=seed)


def run_gradient_suite(
    kinds: Sequence[str] = CONTEXT_KIND_NAMES,
    op_seeds: Sequence[int] = (0, 1, 2),
    model_seed: int = 0,
    max_coords: Optional[int] = 4,
) -> dict[str, float]:
    """All op checks plus one toy-model check per kind; name -> worst error."""
    results: dict[str, float] = {}
    for s in op_seeds:
        for name, err in op_gradient_checks(seed=s).items():
            key = f"op.{name}"
            results[key] = max(results.get(key, 0.0), err)
    for kind_name in kinds:
        results[f"model.{kind_name}"] = toy_model_gradient_check(
            kind_name, seed=model_seed, max_coords=max_coords
        )
    return results
