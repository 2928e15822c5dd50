"""Segmentation networks: PointNet-style baseline, multi-scale blocks with
consolidation units (MS-CU), and grid blocks with a recurrent consolidation
unit (G-RCU).

All forward functions accept leading batch axes: points are ``[..., N, D]``
for the baseline, ``[..., S, N, D]`` (one slab per scale) for MS-CU and
``[..., 4, N, D]`` for G-RCU.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import GruParams, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .config import format_kv, from_kv, parse_kv
from .errors import ArgumentError, DimensionError

VARIANTS = ("baseline", "ms_cu", "g_rcu")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "baseline"
    input_dim: int = 9
    num_classes: int = 13
    point_mlp_widths: tuple[int, ...] = (64, 64, 128)
    block_feature_dim: int = 256
    cu_widths: tuple[int, ...] = (256,)
    cu_count: int | None = None
    rcu_hidden: int = 64
    head_widths: tuple[int, ...] = (256, 128)
    num_scales: int = 3
    group_size: int = 4

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ArgumentError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.input_dim not in (6, 9):
            raise ArgumentError(f"input_dim must be 6 or 9, got {self.input_dim}")
        if self.num_classes < 2:
            raise ArgumentError("num_classes must be at least 2")
        if not self.point_mlp_widths or not self.cu_widths:
            raise ArgumentError("MLP widths must be nonempty")
        if self.cu_count is None:
            object.__setattr__(self, "cu_count", 2 if self.variant == "ms_cu" else 0)
        if self.cu_count < 0:
            raise ArgumentError("cu_count must be non-negative")

    @property
    def use_color(self) -> bool:
        return self.input_dim == 9

    def head_input_dim(self) -> int:
        if self.cu_count:
            return 2 * self.cu_widths[-1]
        return self.consolidation_input_dim()

    def consolidation_input_dim(self) -> int:
        d = self.block_feature_dim
        if self.variant == "ms_cu":
            return d + self.num_scales * d
        if self.variant == "g_rcu":
            return 2 * d + self.rcu_hidden
        return 2 * d


@dataclass
class Model:
    """A configuration plus its named parameter tensors."""

    config: ModelConfig
    params: dict = field(default_factory=dict)

    def gru(self) -> GruParams:
        return GruParams.from_tensors({n: self.params[f"gru.{n}"] for n in GruParams.NAMES})

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def copy(self) -> Model:
        return Model(self.config, {k: Tensor(p.data.copy(), True, k, p.dtype) for k, p in self.params.items()})


def _mlp_dims(prefix: str, dims) -> list[tuple[str, tuple[int, int]]]:
    return [(f"{prefix}.{i}", (a, b)) for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Name -> shape for every parameter of ``cfg``, in creation order."""
    shapes = {}

    def mlp(prefix, dims):
        for name, (a, b) in _mlp_dims(prefix, dims):
            shapes[f"{name}.w"] = (a, b)
            shapes[f"{name}.b"] = (b,)

    desc_dims = [cfg.input_dim, *cfg.point_mlp_widths, cfg.block_feature_dim]
    if cfg.variant == "ms_cu":
        for s in range(cfg.num_scales):
            mlp(f"desc{s}", desc_dims)
    else:
        mlp("desc", desc_dims)
    if cfg.variant == "g_rcu":
        h, d = cfg.rcu_hidden, cfg.block_feature_dim
        for n in GruParams.NAMES:
            shapes[f"gru.{n}"] = (h, d) if n[0] == "W" else (h, h) if n[0] == "U" else (h,)
    width = cfg.consolidation_input_dim()
    for c in range(cfg.cu_count):
        mlp(f"cu{c}", [width, *cfg.cu_widths])
        width = 2 * cfg.cu_widths[-1]
    mlp("head", [width, *cfg.head_widths, cfg.num_classes])
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> Model:
    """Glorot-uniform weights and zero biases from a seeded generator."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 2:
            data = ad.glorot_uniform(rng, shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return Model(cfg, params)


# ---------------------------------------------------------------------------
# building blocks


def mlp(x, params: dict, prefix: str, final_activation: bool = True) -> Tensor:
    """Shared per-row MLP; ReLU after each layer except, optionally, the last."""
    n = 0
    while f"{prefix}.{n}.w" in params:
        n += 1
    if n == 0:
        raise ArgumentError(f"no parameters with prefix {prefix!r}")
    for i in range(n):
        x = ad.linear(x, params[f"{prefix}.{i}.w"], params[f"{prefix}.{i}.b"])
        if i < n - 1 or final_activation:
            x = ad.relu(x)
    return x


def block_descriptor(points, params: dict, prefix: str = "desc"):
    """Per-point MLP followed by max-pooling: ``(point_feats [...,N,D'], block_feat [...,D'])``."""
    feats = mlp(points, params, prefix)
    pooled, _ = ad.max_pool_rows(feats)
    return feats, pooled


def consolidation_unit(feats, params: dict, prefix: str) -> Tensor:
    """MLP to F', pool, then append the pooled vector to every row: ``[..., N, 2F']``."""
    transformed = mlp(feats, params, prefix)
    pooled, _ = ad.max_pool_rows(transformed)
    return ad.concat_cols([transformed, ad.stack_rows(pooled, feats.shape[-2])])


def _consolidate_and_score(feats, model: Model) -> Tensor:
    for c in range(model.config.cu_count):
        feats = consolidation_unit(feats, model.params, f"cu{c}")
    return mlp(feats, model.params, "head", final_activation=False)


def _as_input(points, model: Model) -> Tensor:
    dtype = next(iter(model.params.values())).dtype
    t = points if isinstance(points, Tensor) else Tensor(np.asarray(points), dtype=dtype)
    if t.shape[-1] != model.config.input_dim:
        raise DimensionError(f"points have {t.shape[-1]} features, model expects {model.config.input_dim}")
    return t


def pointnet_forward(points, model: Model) -> Tensor:
    """Baseline scores ``[..., N, M]`` for one block of points."""
    x = _as_input(points, model)
    if x.ndim < 2:
        raise DimensionError(f"points must be [..., N, D], got {x.shape}")
    feats, pooled = block_descriptor(x, model.params)
    joined = ad.concat_cols([feats, ad.stack_rows(pooled, x.shape[-2])])
    return _consolidate_and_score(joined, model)


def rcu_forward(block_feats, gru: GruParams, group_size: int | None = None) -> list[Tensor]:
    """Unsynchronized many-to-many GRU over a sequence of block-features.

    The first ``B`` steps read the inputs and emit nothing; the next ``B``
    steps read zero vectors and emit the updated block-features in input
    order.
    """
    block_feats = [ad.as_tensor(f) for f in block_feats]
    b = len(block_feats)
    if group_size is not None and b != group_size:
        raise DimensionError(f"RCU expects {group_size} block-features, got {b}")
    if b == 0:
        raise DimensionError("RCU needs at least one block-feature")
    lead = block_feats[0].shape[:-1]
    dtype = gru.W_z.dtype
    h = Tensor(np.zeros(lead + (gru.hidden_dim,)), dtype=dtype)
    for f in block_feats:
        h = ad.gru_step(f, h, gru)
    zero = Tensor(np.zeros(lead + (gru.input_dim,)), dtype=dtype)
    outs = []
    for _ in range(b):
        h = ad.gru_step(zero, h, gru)
        outs.append(h)
    return outs


def _group_input(group, kind: str, model: Model) -> Tensor:
    from .blocking import BlockGroup

    if isinstance(group, BlockGroup):
        if group.kind != kind:
            raise ArgumentError(f"expected a {kind} group, got {group.kind}")
        if group.sampled_points is None:
            raise ArgumentError("group has not been sampled yet")
        group = np.stack(group.sampled_points)
    return _as_input(group, model)


def ms_cu_forward(group, model: Model) -> Tensor:
    """Scores ``[..., N, M]`` for the middle-scale block of a multi-scale group.

    Each scale has its own descriptor; the scale block-features are
    concatenated, appended to the middle scale's point-features and passed
    through the chained consolidation units and the head.
    """
    cfg = model.config
    x = _group_input(group, "multiscale", model)
    if x.ndim < 3 or x.shape[-3] != cfg.num_scales:
        raise DimensionError(f"expected [..., {cfg.num_scales}, N, D] multi-scale input, got {x.shape}")
    mid = cfg.num_scales // 2
    pooled, mid_feats = [], None
    for s in range(cfg.num_scales):
        feats, bf = block_descriptor(ad.take(x, s, axis=-3), model.params, f"desc{s}")
        pooled.append(bf)
        if s == mid:
            mid_feats = feats
    ms_feature = ad.concat_cols(pooled)
    joined = ad.concat_cols([mid_feats, ad.stack_rows(ms_feature, x.shape[-2])])
    return _consolidate_and_score(joined, model)


def g_rcu_forward(group, model: Model) -> Tensor:
    """Scores ``[..., B, N, M]`` for every block of a 2x2 grid group.

    One shared descriptor summarizes each block; the RCU exchanges context
    across the block-features; each point then sees its own features, its
    block's original block-feature and the updated one.
    """
    cfg = model.config
    x = _group_input(group, "grid2x2", model)
    if x.ndim < 3 or x.shape[-3] != cfg.group_size:
        raise DimensionError(f"expected [..., {cfg.group_size}, N, D] grid input, got {x.shape}")
    n = x.shape[-2]
    feats, pooled = block_descriptor(x, model.params)
    seq = [ad.take(pooled, b, axis=-2) for b in range(cfg.group_size)]
    updated = ad.stack(rcu_forward(seq, model.gru(), cfg.group_size), axis=-2)
    joined = ad.concat_cols([feats, ad.stack_rows(pooled, n), ad.stack_rows(updated, n)])
    return _consolidate_and_score(joined, model)


def forward(model: Model, inputs) -> Tensor:
    """Dispatch on the model variant."""
    v = model.config.variant
    if v == "baseline":
        return pointnet_forward(inputs, model)
    if v == "ms_cu":
        return ms_cu_forward(inputs, model)
    return g_rcu_forward(inputs, model)


# ---------------------------------------------------------------------------
# persistence


def config_to_kv(cfg: ModelConfig) -> str:
    return format_kv(asdict(cfg))


def config_from_kv(text: str) -> ModelConfig:
    return from_kv(ModelConfig, parse_kv(text))


def save_model(model: Model, path_prefix, extra: dict | None = None) -> None:
    """Write ``<prefix>.ptsg`` (tensors) and ``<prefix>.manifest`` (config)."""
    tensors = dict(model.arrays())
    if extra:
        tensors.update(extra)
    save_checkpoint(f"{path_prefix}.ptsg", tensors)
    with open(f"{path_prefix}.manifest", "w", encoding="utf-8") as fh:
        fh.write(config_to_kv(model.config))


def load_model(path_prefix, with_extra: bool = False):
    with open(f"{path_prefix}.manifest", encoding="utf-8") as fh:
        cfg = config_from_kv(fh.read())
    arrays = load_checkpoint(f"{path_prefix}.ptsg")
    expected = param_shapes(cfg)
    missing = [k for k in expected if k not in arrays]
    if missing:
        raise ArgumentError(f"checkpoint lacks parameters: {', '.join(missing[:5])}")
    params = {}
    for k, shape in expected.items():
        if arrays[k].shape != shape:
            raise DimensionError(f"parameter {k} has shape {arrays[k].shape}, config needs {shape}")
        params[k] = Tensor(arrays[k], requires_grad=True, name=k)
    model = Model(cfg, params)
    if with_extra:
        return model, {k: v for k, v in arrays.items() if k not in expected}
    return model

