import numpy as np
import pytest

from ptseg import autodiff as ad
from ptseg.autodiff import Tensor
from ptseg.blocking import BlockGroup
from ptseg.errors import ArgumentError, DimensionError
from ptseg.gradcheck import grad_check, model_cases
from ptseg.models import (
    ModelConfig,
    block_descriptor,
    consolidation_unit,
    forward,
    init_params,
    load_model,
    param_shapes,
    rcu_forward,
    save_model,
)

SMALL = dict(num_classes=4, point_mlp_widths=(8, 16), block_feature_dim=16, cu_widths=(8,), rcu_hidden=6,
             head_widths=(12,))


def small(variant, **kw):
    cfg = ModelConfig(variant=variant, **{**SMALL, **kw})
    model = init_params(cfg, seed=3)
    rng = np.random.default_rng(0)
    for t in model.params.values():
        if t.ndim == 1:
            t.data[:] = rng.normal(0.1, 0.1, t.shape)
    return model


def distinct_points(rng, shape):
    return rng.permutation(np.prod(shape)).reshape(shape) / np.prod(shape) + rng.normal(0, 0.3, shape)


def mlp_count(dims):
    return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))


def closed_form_count(cfg):
    d, desc = cfg.block_feature_dim, [cfg.input_dim, *cfg.point_mlp_widths, cfg.block_feature_dim]
    total = mlp_count(desc) * (cfg.num_scales if cfg.variant == "ms_cu" else 1)
    width = {"baseline": 2 * d, "ms_cu": d + cfg.num_scales * d, "g_rcu": 2 * d + cfg.rcu_hidden}[cfg.variant]
    if cfg.variant == "g_rcu":
        h = cfg.rcu_hidden
        total += 3 * (h * d + h * h + h)
    for _ in range(cfg.cu_count):
        total += mlp_count([width, *cfg.cu_widths])
        width = 2 * cfg.cu_widths[-1]
    return total + mlp_count([width, *cfg.head_widths, cfg.num_classes])


def test_config_validation():
    with pytest.raises(ArgumentError):
        ModelConfig(variant="ms_rcu")
    with pytest.raises(ArgumentError):
        ModelConfig(input_dim=7)
    with pytest.raises(ArgumentError):
        ModelConfig(num_classes=1)
    with pytest.raises(ArgumentError):
        ModelConfig(point_mlp_widths=())
    assert ModelConfig(variant="ms_cu").cu_count == 2 and ModelConfig().cu_count == 0


@pytest.mark.parametrize("variant", ["baseline", "ms_cu", "g_rcu"])
@pytest.mark.parametrize("cu", [None, 0, 1, 3])
def test_parameter_count_closed_form(variant, cu):
    cfg = ModelConfig(variant=variant, cu_count=cu)
    assert init_params(cfg).num_parameters() == closed_form_count(cfg)


def test_ms_cu_without_cus_is_multiscale_pointnet():
    cfg = ModelConfig(variant="ms_cu", cu_count=0)
    d = cfg.block_feature_dim
    head = [d + 3 * d, *cfg.head_widths, cfg.num_classes]
    assert init_params(cfg).num_parameters() == 3 * mlp_count([9, 64, 64, 128, d]) + mlp_count(head)


def test_init_is_glorot_and_seeded():
    cfg = ModelConfig()
    a, b = init_params(cfg, 5), init_params(cfg, 5)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    w = a.params["desc.0.w"].data
    assert np.abs(w).max() <= np.sqrt(6 / (9 + 64))
    assert not np.any(a.params["desc.0.b"].data)


def test_block_descriptor_single_point_and_duplication(rng):
    model = small("baseline")
    x = rng.normal(size=(1, 9))
    feats, pooled = block_descriptor(x, model.params)
    assert np.array_equal(pooled.data, feats.data[0])
    x = rng.normal(size=(20, 9))
    _, p1 = block_descriptor(x, model.params)
    _, p2 = block_descriptor(np.concatenate([x, x]), model.params)
    assert p1.data.tobytes() == p2.data.tobytes()


def test_pointnet_shape_equivariance_and_identical_rows(rng):
    model = small("baseline")
    x = distinct_points(rng, (30, 9)).astype(np.float32)
    x[7] = x[3]
    out = forward(model, x).data
    assert out.shape == (30, 4) and np.isfinite(out).all()
    assert np.array_equal(out[7], out[3])
    perm = rng.permutation(30)
    assert np.array_equal(forward(model, x[perm]).data, out[perm])


def test_consolidation_unit_shape_and_pooled_half(rng):
    model = small("ms_cu")
    feats = Tensor(rng.normal(size=(10, 64)).astype(np.float32))
    out = consolidation_unit(feats, model.params, "cu0").data
    assert out.shape == (10, 16)
    assert (out[:, 8:] == out[0, 8:]).all()
    perm = rng.permutation(10)
    assert np.array_equal(consolidation_unit(Tensor(feats.data[perm]), model.params, "cu0").data, out[perm])


def test_rcu_zero_params_and_context_flow(rng):
    p = ad.GruParams.init(5, 4, rng)
    feats = [rng.normal(size=5) for _ in range(4)]
    outs = rcu_forward(feats, p, 4)
    assert len(outs) == 4
    bumped = [feats[0] + 0.5] + feats[1:]
    for a, b in zip(outs[1:], rcu_forward(bumped, p, 4)[1:]):
        assert np.abs(a.data - b.data).max() > 1e-6
    for t in p.tensors().values():
        t.data[...] = 0
    assert all(not np.any(o.data) for o in rcu_forward(feats, p))
    with pytest.raises(DimensionError):
        rcu_forward(feats[:3], p, 4)


def test_ms_cu_shape_and_largest_scale_permutation(rng):
    model = small("ms_cu")
    x = distinct_points(rng, (3, 16, 9)).astype(np.float32)
    out = forward(model, x).data
    assert out.shape == (16, 4)
    y = x.copy()
    y[2] = y[2][rng.permutation(16)]
    assert np.array_equal(forward(model, y).data, out)
    perm = rng.permutation(16)
    y = x.copy()
    y[1] = y[1][perm]
    assert np.array_equal(forward(model, y).data, out[perm])


def test_ms_cu_accepts_sampled_group(rng):
    model = small("ms_cu")
    g = BlockGroup("multiscale", [None] * 3, sampled_points=[rng.normal(size=(8, 9)) for _ in range(3)])
    assert forward(model, g).shape == (8, 4)
    with pytest.raises(ArgumentError):
        forward(model, BlockGroup("grid2x2", [None] * 4, sampled_points=[np.zeros((8, 9))] * 4))


def test_g_rcu_shape_and_block_permutation(rng):
    model = small("g_rcu")
    x = distinct_points(rng, (4, 12, 9)).astype(np.float32)
    out = forward(model, x).data
    assert out.shape == (4, 12, 4)
    perm = rng.permutation(12)
    y = x.copy()
    y[2] = y[2][perm]
    got = forward(model, y).data
    assert np.array_equal(got[2], out[2][perm])
    assert np.array_equal(np.delete(got, 2, 0), np.delete(out, 2, 0))


def test_g_rcu_zero_gru_ablation(rng):
    model = small("g_rcu")
    for n in ad.GruParams.NAMES:
        model.params[f"gru.{n}"].data[...] = 0
    x = distinct_points(rng, (4, 10, 9)).astype(np.float32)
    swapped = x[[0, 2, 1, 3]]
    assert np.array_equal(forward(model, swapped).data[0], forward(model, x).data[0])
    same = np.repeat(x[:1], 4, axis=0)
    out = forward(model, same).data
    assert all(np.array_equal(out[0], out[b]) for b in range(4))


def test_g_rcu_context_reaches_other_blocks(rng):
    model = small("g_rcu")
    x = distinct_points(rng, (4, 10, 9)).astype(np.float32)
    y = x.copy()
    y[3] += 1.0
    assert not np.array_equal(forward(model, x).data[0], forward(model, y).data[0])


def test_batched_groups_match_single_groups(rng):
    for variant, shape in (("baseline", (10, 9)), ("ms_cu", (3, 10, 9)), ("g_rcu", (4, 10, 9))):
        model = small(variant)
        xs = rng.normal(size=(3, *shape)).astype(np.float32)
        batched = forward(model, xs).data
        for i in range(3):
            assert np.array_equal(batched[i], forward(model, xs[i]).data)


def test_input_dim_checked(rng):
    with pytest.raises(DimensionError):
        forward(small("baseline"), rng.normal(size=(5, 6)))
    with pytest.raises(DimensionError):
        forward(small("g_rcu"), rng.normal(size=(3, 5, 9)))


def test_six_feature_models(rng):
    model = small("baseline", input_dim=6)
    assert forward(model, rng.normal(size=(5, 6))).shape == (5, 4)


@pytest.mark.parametrize("case", model_cases(0), ids=lambda c: c.name)
def test_miniature_models_pass_gradcheck(f64, case):
    r = grad_check(case.f, case.inputs, eps=1e-6, tol=1e-4)
    assert r.passed, r.max_rel_error


def test_save_load_round_trip(tmp_path, rng):
    model = small("g_rcu")
    save_model(model, tmp_path / "m", extra={"note": np.ones(2)})
    back, extra = load_model(tmp_path / "m", with_extra=True)
    assert back.config == model.config
    assert list(back.params) == list(param_shapes(model.config))
    for k, t in model.params.items():
        assert back.params[k].data.tobytes() == t.data.astype(np.float32).tobytes()
    assert extra["note"].tolist() == [1.0, 1.0]
    x = rng.normal(size=(4, 6, 9)).astype(np.float32)
    assert np.array_equal(forward(back, x).data, forward(model, x).data)


def test_load_rejects_missing_parameters(tmp_path):
    model = small("baseline")
    del model.params["head.0.w"]
    save_model(model, tmp_path / "m")
    with pytest.raises(ArgumentError):
        load_model(tmp_path / "m")
