"""Central finite-difference check of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor, backward, get_precision
from .errors import ArgumentError, StateError


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tol: float
    worst_index: dict[str, tuple] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tol


def relative_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def grad_check(f, inputs, eps: float = 1e-5, tol: float = 1e-6, masks=None, names=None) -> GradCheckReport:
    """Compare gradients of the scalar ``f(*inputs)`` against central differences.

    ``inputs`` are leaf tensors; each one's data is perturbed in place and
    restored. ``masks`` optionally selects, per input, which elements to
    compare (e.g. to skip inputs sitting on a ReLU kink).
    """
    if get_precision() != "f64" or any(t.dtype != np.float64 for t in inputs):
        raise StateError("grad_check requires 64-bit precision")
    names = names or [t.name or f"input{i}" for i, t in enumerate(inputs)]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape():
        out = f(*inputs)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ArgumentError("grad_check needs a function with a scalar output")
    backward(out)

    errors, worst = {}, {}
    for i, (t, name) in enumerate(zip(inputs, names)):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            hi = f(*inputs).item()
            flat[j] = orig - eps
            lo = f(*inputs).item()
            flat[j] = orig
            num_flat[j] = (hi - lo) / (2 * eps)
        err = relative_error(analytic, numeric)
        if masks is not None and masks[i] is not None:
            err = np.where(np.asarray(masks[i], dtype=bool), err, 0.0)
        errors[name] = float(err.max()) if err.size else 0.0
        worst[name] = np.unravel_index(int(err.argmax()), err.shape) if err.size else ()
    return GradCheckReport(errors, tol, worst)


# ---------------------------------------------------------------------------
# the standard suite: every operator plus miniature versions of each model


@dataclass
class GradCase:
    name: str
    f: object
    inputs: list
    masks: list | None = None


def _leaf(rng, shape, name, scale=1.0):
    return Tensor(rng.normal(0.0, scale, shape), requires_grad=True, name=name, dtype=np.float64)


def _away_from_zero(rng, shape, name, margin=1e-2):
    x = rng.normal(0.0, 1.0, shape)
    x = np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin * 2, x)
    return Tensor(x, requires_grad=True, name=name, dtype=np.float64)


def _projection(rng, shape):
    # a random linear readout makes every output element matter with distinct weights
    return rng.normal(0.0, 1.0, shape)


def operator_cases(seed: int = 0) -> list[GradCase]:
    from . import autodiff as ad

    with ad.precision("f64"):
        return _operator_cases(seed)


def _operator_cases(seed: int) -> list[GradCase]:
    from . import autodiff as ad

    rng = np.random.default_rng(seed)
    cases = []

    x, w, b = _leaf(rng, (2, 5, 3), "x"), _leaf(rng, (3, 4), "w"), _leaf(rng, (4,), "b")
    pw = _projection(rng, (2, 5, 4))
    cases.append(GradCase("linear", lambda x, w, b, pw=pw: ad.weighted_sum(ad.linear(x, w, b), pw), [x, w, b]))

    x = _away_from_zero(rng, (4, 6), "x")
    pw = _projection(rng, (4, 6))
    cases.append(GradCase("relu", lambda x, pw=pw: ad.weighted_sum(ad.relu(x), pw), [x]))

    x = _leaf(rng, (2, 7, 5), "x")
    pw = _projection(rng, (2, 5))
    cases.append(GradCase("max_pool_rows", lambda x, pw=pw: ad.weighted_sum(ad.max_pool_rows(x)[0], pw), [x]))

    x = _leaf(rng, (3, 4), "x")
    pw = _projection(rng, (3, 5, 4))
    cases.append(GradCase("stack_rows", lambda x, pw=pw: ad.weighted_sum(ad.stack_rows(x, 5), pw), [x]))

    a, c = _leaf(rng, (3, 2), "a"), _leaf(rng, (3, 4), "b")
    pw = _projection(rng, (3, 6))
    cases.append(GradCase("concat_cols", lambda a, c, pw=pw: ad.weighted_sum(ad.concat_cols([a, c]), pw), [a, c]))

    x = _leaf(rng, (3, 4, 2), "x")
    pw = _projection(rng, (3, 2))
    cases.append(GradCase("take", lambda x, pw=pw: ad.weighted_sum(ad.take(x, 2, axis=1), pw), [x]))

    a, c = _leaf(rng, (3, 2), "a"), _leaf(rng, (3, 2), "b")
    pw = _projection(rng, (3, 2, 2))
    cases.append(GradCase("stack", lambda a, c, pw=pw: ad.weighted_sum(ad.stack([a, c], axis=1), pw), [a, c]))

    x = _leaf(rng, (3, 4), "x")
    cases.append(GradCase("sum_all", lambda x: ad.sum_all(x), [x]))

    z = _leaf(rng, (2, 6, 5), "logits")
    labels = rng.integers(0, 5, (2, 6))
    cases.append(GradCase("softmax_cross_entropy", lambda z: ad.softmax_cross_entropy(z, labels), [z]))

    p = ad.GruParams.init(4, 3, rng)
    for t in (p.b_z, p.b_r, p.b_h):
        t.data[:] = rng.normal(0.0, 0.5, t.shape)
    xs, h = _leaf(rng, (2, 4), "x"), _leaf(rng, (2, 3), "h")
    gp = list(p.tensors().values())
    pw = _projection(rng, (2, 3))

    def gru(x, h, *ps, pw=pw):
        return ad.weighted_sum(ad.gru_step(x, h, ad.GruParams(*ps)), pw)

    cases.append(GradCase("gru_step", gru, [xs, h, *gp]))
    return cases


def model_cases(seed: int = 0) -> list[GradCase]:
    from .autodiff import precision

    with precision("f64"):
        return _model_cases(seed)


def _model_cases(seed: int) -> list[GradCase]:
    from .autodiff import softmax_cross_entropy
    from .models import ModelConfig, forward, init_params

    cases = []
    rng = np.random.default_rng(seed + 1)
    small = dict(input_dim=9, num_classes=3, point_mlp_widths=(5, 4), block_feature_dim=6,
                 cu_widths=(4,), rcu_hidden=5, head_widths=(5,))
    shapes = {"baseline": (6, 9), "ms_cu": (3, 6, 9), "g_rcu": (4, 6, 9)}
    for variant, shape in shapes.items():
        cfg = ModelConfig(variant=variant, **small)
        model = init_params(cfg, seed)
        for t in model.params.values():
            if t.ndim == 1:
                t.data[:] = rng.normal(0.2, 0.1, t.shape)
        points = rng.uniform(-1.0, 1.0, shape)
        # multi-scale models score only the middle scale
        labels = rng.integers(0, cfg.num_classes, shape[-2:-1] if variant == "ms_cu" else shape[:-1])
        names = list(model.params)

        def f(*ts, model=model, points=points, labels=labels, names=names):
            saved = dict(model.params)
            model.params.update(zip(names, ts))
            try:
                return softmax_cross_entropy(forward(model, points), labels)
            finally:
                model.params.update(saved)

        cases.append(GradCase(variant, f, [model.params[n] for n in names]))
    return cases


def run_suite(seed: int = 0, eps: float = 1e-6, tol: float = 1e-4, include_models: bool = True) -> dict[str, GradCheckReport]:
    """Check every case; returns ``name -> report``."""
    cases = operator_cases(seed) + (model_cases(seed) if include_models else [])
    out = {}
    for case in cases:
        names = [t.name or f"input{i}" for i, t in enumerate(case.inputs)]
        out[case.name] = grad_check(case.f, case.inputs, eps=eps, tol=tol, masks=case.masks, names=names)
    return out
