"""Training loop, checkpoints and whole-scene inference."""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .blocking import (
    SamplerConfig,
    chunk_indices,
    grid_groups,
    localized_features,
    multiscale_blocks,
    multiscale_sample,
    resample_indices,
    sample_block_points,
    split_into_blocks,
)
from .config import field_hints, format_kv, from_kv, parse_kv
from .errors import ArgumentError, DataError
from .models import Model, ModelConfig, forward, init_params, load_model, save_model
from .optim import Adam
from .pointcloud import LabeledPointCloud

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_groups: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    variant: str = "baseline"
    checkpoint_every: int = 0
    # multi-scale groups drawn per cloud and epoch; 0 means point count / N
    groups_per_cloud: int = 0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ArgumentError("epochs must be at least 1")
        if self.batch_groups < 1:
            raise ArgumentError("batch_groups must be at least 1")
        m = self.model
        if m.variant != self.variant:
            # keep an explicit cu_count, re-derive the per-variant default otherwise
            default = ModelConfig(variant=m.variant).cu_count
            m = dataclasses.replace(m, variant=self.variant, cu_count=None if m.cu_count == default else m.cu_count)
        if m.num_scales != len(self.sampler.radii):
            m = dataclasses.replace(m, num_scales=len(self.sampler.radii))
        object.__setattr__(self, "model", m)


_OWN = ("epochs", "batch_groups", "lr", "beta1", "beta2", "eps", "seed", "variant", "checkpoint_every", "groups_per_cloud")


def train_config_keys() -> dict[str, type]:
    """Flat key -> type hint map accepted by config files and CLI flags."""
    hints = field_hints(TrainConfig)
    keys = {k: hints[k] for k in _OWN}
    for k, h in field_hints(SamplerConfig).items():
        keys.setdefault(k, h)
    for k, h in field_hints(ModelConfig).items():
        keys.setdefault(k, h)
    return keys


def train_config_from_mapping(mapping: dict, base: TrainConfig | None = None) -> TrainConfig:
    """Build a TrainConfig from flat ``key -> value`` pairs (strings or typed values)."""
    base = base or TrainConfig()
    unknown = sorted(set(mapping) - set(train_config_keys()))
    if unknown:
        raise ArgumentError(f"unknown config keys: {', '.join(unknown)}")
    own = {k: v for k, v in mapping.items() if k in _OWN}
    samp = {k: v for k, v in mapping.items() if k in field_hints(SamplerConfig)}
    mod = {k: v for k, v in mapping.items() if k in field_hints(ModelConfig) and k != "variant"}
    if "seed" in mapping:
        samp["seed"] = mapping["seed"]
    sampler = from_kv(SamplerConfig, samp, base.sampler)
    variant = own.get("variant", base.variant)
    model_base = dataclasses.replace(base.model, variant=variant) if variant != base.model.variant else base.model
    if variant != base.model.variant and "cu_count" not in mod:
        model_base = dataclasses.replace(model_base, cu_count=None)
    model = from_kv(ModelConfig, mod, model_base)
    out = from_kv(TrainConfig, own, base)
    return dataclasses.replace(out, sampler=sampler, model=model)


def load_train_config(path, overrides: dict | None = None) -> TrainConfig:
    mapping = parse_kv(Path(path).read_text(encoding="utf-8"))
    mapping.update(overrides or {})
    return train_config_from_mapping(mapping)


def train_config_to_kv(cfg: TrainConfig) -> str:
    flat = {k: getattr(cfg, k) for k in _OWN}
    flat.update({k: v for k, v in dataclasses.asdict(cfg.sampler).items() if k != "seed"})
    flat.update({k: v for k, v in dataclasses.asdict(cfg.model).items() if k != "variant"})
    return format_kv(flat)


@dataclass
class EpochReport:
    epoch: int
    loss: float
    accuracy: float
    seconds: float = field(default=0.0, compare=False)


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray


def _units(clouds, cfg: TrainConfig) -> list:
    """Sampling units for one epoch: blocks, grid groups, or multi-scale draws."""
    s = cfg.sampler
    units = []
    if cfg.variant == "ms_cu":
        for ci, c in enumerate(clouds):
            k = cfg.groups_per_cloud or max(1, len(c) // s.points_per_block)
            units.extend((ci, None) for _ in range(k))
        return units
    step = max(1, int(round(s.block_size / s.train_stride)))
    for ci, c in enumerate(clouds):
        blocks = split_into_blocks(c, s, "train")
        if cfg.variant == "baseline":
            units.extend((ci, b) for b in blocks)
        else:
            units.extend((ci, g) for g in grid_groups(blocks, "train", step=step))
    return units


def _make_batch(units, clouds, cfg: TrainConfig, rng) -> Batch:
    n = cfg.sampler.points_per_block
    use_color = cfg.model.use_color
    xs, ys = [], []
    for ci, unit in units:
        cloud = clouds[ci]
        if cfg.variant == "baseline":
            f, idx = sample_block_points(unit, cloud, n, rng, use_color)
            xs.append(f)
            ys.append(cloud.labels[idx])
        elif cfg.variant == "g_rcu":
            fs, ls = [], []
            for b in unit.blocks:
                f, idx = sample_block_points(b, cloud, n, rng, use_color)
                fs.append(f)
                ls.append(cloud.labels[idx])
            xs.append(np.stack(fs))
            ys.append(np.stack(ls))
        else:
            g = multiscale_sample(cloud, cfg.sampler, rng, use_color)
            xs.append(np.stack(g.sampled_points))
            ys.append(cloud.labels[g.sampled_indices[cfg.sampler.middle_scale]])
    return Batch(np.stack(xs), np.stack(ys))


def train_step(model: Model, opt: Adam, batch: Batch):
    """One optimizer step. Returns ``(mean loss, correct points, points)``."""
    with ad.Tape() as tape:
        scores = forward(model, batch.inputs)
        loss = ad.softmax_cross_entropy(scores, batch.labels)
    opt.zero_grad()
    tape.backward(loss)
    opt.step()
    pred = np.argmax(scores.data, axis=-1)
    return float(loss.data.reshape(-1)[0]), int((pred == batch.labels).sum()), int(batch.labels.size)


def fit_batch(model: Model, batch: Batch, epochs: int, lr: float = 1e-3) -> list[EpochReport]:
    """Optimize repeatedly on one fixed batch (an overfitting probe)."""
    opt = Adam(model.params, lr=lr)
    reports = []
    for e in range(epochs):
        t0 = time.perf_counter()
        loss, correct, count = train_step(model, opt, batch)
        reports.append(EpochReport(e, loss, correct / count, time.perf_counter() - t0))
    return reports


def _save_state(prefix, model: Model, opt: Adam, epoch: int) -> None:
    extra = dict(opt.state_arrays())
    extra["train.epoch"] = np.array([epoch], dtype=np.float64)
    save_model(model, prefix, extra)


def train(clouds, cfg: TrainConfig, checkpoint_dir=None, resume=None, epoch_callback=None):
    """Train a model on ``clouds``; returns ``(model, reports)``.

    Every epoch draws its samples from a generator seeded by ``(seed, epoch)``,
    so a run resumed from a checkpoint (``resume`` = checkpoint prefix)
    reproduces the uninterrupted run exactly.
    """
    clouds = list(clouds)
    if not clouds:
        raise DataError("no training clouds")
    for c in clouds:
        if c.num_classes != cfg.model.num_classes:
            raise DataError(f"cloud {c.tag!r} has {c.num_classes} classes, model expects {cfg.model.num_classes}")
    units = _units(clouds, cfg)
    if not units:
        raise DataError("no valid blocks or groups in any training cloud")

    start = 0
    if resume is not None:
        model, extra = load_model(resume, with_extra=True)
        if model.config != cfg.model:
            raise ArgumentError("checkpoint configuration differs from the training configuration")
        opt = Adam(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        opt.load_state_arrays(extra)
        start = int(extra["train.epoch"][0]) + 1
    else:
        model = init_params(cfg.model, cfg.seed)
        opt = Adam(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)

    reports = []
    for epoch in range(start, cfg.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(units))
        loss_sum, correct, count = 0.0, 0, 0
        for s in range(0, len(order), cfg.batch_groups):
            batch = _make_batch([units[i] for i in order[s:s + cfg.batch_groups]], clouds, cfg, rng)
            loss, ok, n = train_step(model, opt, batch)
            loss_sum += loss * n
            correct += ok
            count += n
        report = EpochReport(epoch, loss_sum / count, correct / count, time.perf_counter() - t0)
        if not np.isfinite(report.loss):
            raise DataError(f"loss became non-finite in epoch {epoch}")
        reports.append(report)
        log.info("epoch %d loss %.4f acc %.4f (%.1fs)", epoch, report.loss, report.accuracy, report.seconds)
        if epoch_callback is not None:
            epoch_callback(report)
        if checkpoint_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            _save_state(Path(checkpoint_dir) / f"epoch{epoch:04d}", model, opt, epoch)
    if checkpoint_dir is not None:
        _save_state(Path(checkpoint_dir) / "model", model, opt, cfg.epochs - 1)
    return model, reports


# ---------------------------------------------------------------------------
# inference


def _run(model: Model, items, votes, batch_size: int) -> None:
    """Forward ``(inputs, [(indices, vote?)...])`` items in batches and add argmax votes."""
    for s in range(0, len(items), batch_size):
        chunk = items[s:s + batch_size]
        scores = forward(model, np.stack([x for x, _ in chunk])).data
        pred = np.argmax(scores, axis=-1)
        for (_, targets), p in zip(chunk, pred):
            if pred.ndim == 2:
                targets, p = [targets], [p]
            for (idx, counts), row in zip(targets, p):
                if counts:
                    np.add.at(votes, (idx, row), 1)


def predict_scene(cloud: LabeledPointCloud, model: Model, sampler: SamplerConfig, seed: int = 0,
                  batch_size: int = 16) -> np.ndarray:
    """Label every point of ``cloud`` from non-overlapping test blocks.

    Blocks larger than N are split into several N-point passes so every point
    is scored. Each scored row votes for its point; the majority wins, ties go
    to the lower class id. Points in dropped (too sparse) windows get the most
    frequent predicted label.
    """
    cfg = model.config
    n = sampler.points_per_block
    rng = np.random.default_rng([seed, 104729])
    votes = np.zeros((len(cloud), cfg.num_classes), dtype=np.int64)
    blocks = split_into_blocks(cloud, sampler, "test")
    items = []
    if cfg.variant == "baseline":
        for b in blocks:
            for idx in chunk_indices(b.indices, n, rng):
                items.append((localized_features(cloud, idx, b.center, cfg.use_color), (idx, True)))
    elif cfg.variant == "g_rcu":
        for g in grid_groups(blocks, "test"):
            chunks = [chunk_indices(b.indices, n, rng) for b in g.blocks]
            for k in range(max(len(c) for c in chunks)):
                feats, targets = [], []
                for b, c, dup in zip(g.blocks, chunks, g.duplicated):
                    idx = c[k % len(c)]
                    feats.append(localized_features(cloud, idx, b.center, cfg.use_color))
                    targets.append((idx, not dup))
                items.append((np.stack(feats), targets))
    else:
        mid = sampler.middle_scale
        xy = cloud.positions[:, :2].astype(np.float64)
        for b in blocks:
            center = b.center
            windows = []
            for s, blk in enumerate(multiscale_blocks(cloud, center, sampler.radii)):
                idx = blk.indices
                if s != mid and len(idx) == 0:
                    idx = b.indices[[np.argmin(np.abs(xy[b.indices] - center).max(axis=1))]]
                windows.append(idx)
            for idx in chunk_indices(b.indices, n, rng):
                feats = []
                for s, w in enumerate(windows):
                    sel = idx if s == mid else resample_indices(w, n, rng)
                    feats.append(localized_features(cloud, sel, center, cfg.use_color))
                items.append((np.stack(feats), (idx, True)))
    _run(model, items, votes, batch_size)
    labels = np.argmax(votes, axis=1)
    voted = votes.sum(axis=1) > 0
    if not voted.all():
        fallback = int(np.argmax(np.bincount(labels[voted], minlength=cfg.num_classes))) if voted.any() else 0
        labels[~voted] = fallback
    return labels


def save_train_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(train_config_to_kv(cfg), encoding="utf-8")
