"""Unsupervised pretraining, supervised fine-tuning and linear probing."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from .checkpoint import Checkpoint, load_checkpoint
from .imaging import GridSpec, default_texture_bank, extract_grid, make_variants, resize
from .loss import LossWeights, combine_stacked, contrastive_logits, contrastive_loss
from .models import Encoder, ModelConfig, build_models, encode_grids
from .seeding import stream
from .sequencing import Direction, as_direction, make_samples
from .tensor import Tensor, no_grad, parameter, take

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    """A loss or gradient went non-finite; ``state`` holds a diagnostic dump."""

    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class PretrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    k: int = 3
    directions: tuple = (Direction.FORWARD, Direction.BACKWARD)
    n_textures: int = 5
    texture_blend: float = 0.6
    omega0: float = 1.0
    omega_texture: float = 0.5
    tau: float = 0.5
    negatives: str = "prediction"
    texture_negatives: str = "variant"
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    schedule: str = "cosine"
    clip_norm: float = 5.0
    epochs: int = 30
    batch_size: int = 1
    early_stop: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.texture_negatives not in ("variant", "original"):
            raise ValueError(f"texture_negatives must be 'variant' or 'original', got {self.texture_negatives!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"schedule must be 'cosine' or 'constant', got {self.schedule!r}")
        object.__setattr__(self, "directions", tuple(as_direction(d) for d in self.directions))

    @property
    def weights(self) -> LossWeights:
        return LossWeights.uniform(self.omega0, self.omega_texture, self.n_textures)

    def texture_bank(self):
        scale = self.model.grid.image_side / 64.0
        return default_texture_bank(self.n_textures, self.texture_blend, scale=scale)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "model"}
        d["directions"] = [x.value for x in self.directions]
        d["model"] = self.model.to_dict()
        return d


@dataclass(frozen=True)
class FinetuneConfig:
    checkpoint: object = None  # path, Checkpoint, or None for a fresh encoder
    classes: int = 4
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 100
    batch_size: int = 0  # 0 = full batch
    freeze: bool = True
    standardize: bool = True
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError(f"classes must be >= 2, got {self.classes}")
        if self.epochs < 1 or self.lr < 0:
            raise ValueError("epochs must be >= 1 and lr >= 0")


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    texture_losses: dict
    combined: float
    mean_positive_logit: float
    mean_negative_logit: float
    wall_ms: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


class SGD:
    """SGD with momentum and L2 weight decay over named parameters."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        return math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in self.params if p.grad is not None))

    def clip(self, max_norm: float) -> None:
        norm = self.grad_norm()
        if max_norm > 0 and norm > max_norm:
            scale = np.float32(max_norm / norm)
            for p in self.params:
                if p.grad is not None:
                    p.grad *= scale

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        if lr == 0:
            return
        lr32 = np.float32(lr)
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + np.float32(self.weight_decay) * p.data
            v *= np.float32(self.momentum)
            v += g
            p.data = p.data - lr32 * v


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 1:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total))


# -- pretraining -----------------------------------------------------------------------


class SampleIndex:
    """Flat cell indices for every (direction, anchor) of one grid geometry."""

    def __init__(self, spec: GridSpec, k: int, directions, n_grids: int):
        from .imaging import PatchGrid

        s = spec.grid_side
        dummy = [PatchGrid(spec, np.empty((s, s, 0, 0, 3), np.float32), t) for t in range(n_grids)]
        samples = make_samples(dummy, k, directions)
        originals = [smp for smp in samples if smp.texture_id == 0]
        self.train_cells = np.array([smp.train.flat(s) for smp in originals], dtype=np.int64)
        self.target_cells = np.array([smp.target.flat(s) for smp in originals], dtype=np.int64)
        self.texture_ids = list(range(n_grids))
        self.n_samples = len(samples)

    @property
    def n_anchors(self) -> int:
        return self.train_cells.shape[0]


def image_loss(
    encoder: Encoder,
    ar,
    image: np.ndarray,
    cfg: PretrainConfig,
    bank,
    index: SampleIndex,
):
    """Combined loss for all samples of one image plus per-texture stats."""
    spec = cfg.model.grid
    variants = make_variants(resize(image, spec.image_side), bank)
    grids = [extract_grid(v, spec, t) for t, v in enumerate(variants)]
    reps = encode_grids(encoder, grids)  # G × s² × d
    train = take(reps, (0, index.train_cells))  # B × k² × d
    targets = take(reps, (slice(None), index.target_cells))  # G × B × n × d
    pred = ar(train, index.train_cells, index.target_cells)  # B × n × d
    pred_b = pred.reshape(1, *pred.shape)
    if cfg.texture_negatives == "variant":
        # negatives come from the target's own variant, so texture alone cannot separate them
        train_b = take(reps, (slice(None), index.train_cells))  # G × B × k² × d
    else:
        train_b = train.reshape(1, *train.shape)
    per_sample = contrastive_loss(pred_b, targets, train_b, cfg.tau, cfg.negatives)  # G × B
    per_texture = per_sample.mean(axis=1)
    combined = combine_stacked(per_texture, index.texture_ids, cfg.weights)
    pos, neg = contrastive_logits(pred_b.detach(), targets.detach(), train_b.detach(), cfg.tau, cfg.negatives)
    # reported per target location so values compare across k
    n_loc = index.target_cells.shape[1]
    stats = {
        "texture_losses": per_texture.data.astype(np.float64) / n_loc,
        "combined": float(combined.data) / n_loc,
        "pos": float(pos.data.mean(dtype=np.float64)),
        "neg": float(neg.data.mean(dtype=np.float64)),
    }
    return combined, stats


def init_models(cfg_model: ModelConfig, seed: int):
    return build_models(cfg_model, stream(seed, "init"))


def models_checkpoint(encoder, ar, config: dict) -> Checkpoint:
    params = OrderedDict()
    params.update(encoder.named_parameters("encoder."))
    if ar is not None:
        params.update(ar.named_parameters("autoregressor."))
    return Checkpoint(config, OrderedDict((k, v.data.copy()) for k, v in params.items()))


def restore_models(ckpt: Checkpoint):
    model_cfg = ModelConfig.from_dict(ckpt.config["model"])
    encoder, ar = build_models(model_cfg, np.random.default_rng(0))
    encoder.load_state_dict(ckpt.subset("encoder."))
    ar_state = ckpt.subset("autoregressor.")
    if ar_state:
        ar.load_state_dict(ar_state)
    else:
        ar = None
    return model_cfg, encoder, ar


def _diagnostics(encoder, ar, step, epoch, last) -> dict:
    norms = {}
    for name, p in list(encoder.named_parameters("encoder.").items()) + list(ar.named_parameters("autoregressor.").items()):
        norms[name] = {
            "param_norm": float(np.linalg.norm(p.data)),
            "grad_finite": None if p.grad is None else bool(np.isfinite(p.grad).all()),
        }
    return {"step": step, "epoch": epoch, "last_metrics": last, "parameters": norms}


def pretrain(
    dataset: Sequence[np.ndarray],
    cfg: PretrainConfig,
    on_metrics: Callable[[MetricsRecord], None] | None = None,
    history: list | None = None,
) -> Checkpoint:
    """Contrastive pretraining of encoder and autoregressor, one image per loop step."""
    if len(dataset) == 0:
        raise ValueError("pretraining needs a non-empty dataset")
    encoder, ar = init_models(cfg.model, cfg.seed)
    params = encoder.parameters() + ar.parameters()
    opt = SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    bank = cfg.texture_bank()
    index = SampleIndex(cfg.model.grid, cfg.k, cfg.directions, cfg.n_textures + 1)
    if index.n_anchors == 0:
        raise ValueError(f"grid side {cfg.model.grid.grid_side} has no valid anchors for k={cfg.k}")
    order_rng = stream(cfg.seed, "order")
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    step = 0
    epoch_means: list[float] = []
    stalled = 0
    last = None
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(dataset))
        epoch_total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            t0 = time.perf_counter()
            batch = order[start:start + cfg.batch_size]
            opt.zero_grad()
            tex = np.zeros(cfg.n_textures + 1)
            combined_value = pos = neg = 0.0
            try:
                for idx in batch:
                    combined, stats = image_loss(encoder, ar, dataset[idx], cfg, bank, index)
                    (combined * (1.0 / len(batch))).backward()
                    combined_value += stats["combined"] / len(batch)
                    tex += stats["texture_losses"] / len(batch)
                    pos += stats["pos"] / len(batch)
                    neg += stats["neg"] / len(batch)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"non-finite loss at step {step}: {exc}", _diagnostics(encoder, ar, step, epoch, last)) from exc
            if not all(p.grad is None or np.isfinite(p.grad).all() for p in params):
                raise TrainingDiverged(f"non-finite gradient at step {step}", _diagnostics(encoder, ar, step, epoch, last))
            opt.clip(cfg.clip_norm)
            lr = cosine_lr(cfg.lr, step, total_steps) if cfg.schedule == "cosine" else cfg.lr
            opt.step(lr)
            record = MetricsRecord(
                step=step,
                epoch=epoch,
                texture_losses={str(t): float(v) for t, v in enumerate(tex)},
                combined=combined_value,
                mean_positive_logit=pos,
                mean_negative_logit=neg,
                wall_ms=(time.perf_counter() - t0) * 1000.0,
            )
            last = dataclasses.asdict(record)
            if on_metrics is not None:
                on_metrics(record)
            if history is not None:
                history.append(record)
            epoch_total += combined_value * len(batch)
            step += 1
        epoch_means.append(epoch_total / len(dataset))
        log.info("epoch %d mean combined loss %.4f", epoch, epoch_means[-1])
        if cfg.early_stop and len(epoch_means) > 1:
            prev, cur = epoch_means[-2], epoch_means[-1]
            stalled = stalled + 1 if (prev - cur) < 1e-3 * abs(prev) else 0
            if stalled >= 3:
                log.info("early stop after epoch %d", epoch)
                break
    return models_checkpoint(encoder, ar, {"kind": "pretrain", "model": cfg.model.to_dict(), "pretrain": cfg.to_dict()})


# -- representation utilities -----------------------------------------------------------


def image_features(encoder: Encoder, images: Sequence[np.ndarray], spec: GridSpec) -> Tensor:
    """Mean patch-grid representation per image, N×d."""
    grids = [extract_grid(resize(img, spec.image_side), spec) for img in images]
    reps = encode_grids(encoder, grids)
    return reps.mean(axis=1)


def texture_invariance(encoder: Encoder, images: Sequence[np.ndarray], bank, spec: GridSpec) -> float:
    """Mean cosine similarity between each patch's vector and its textured twin's."""
    sims = []
    with no_grad():
        for img in images:
            variants = make_variants(resize(img, spec.image_side), bank)
            grids = [extract_grid(v, spec, t) for t, v in enumerate(variants)]
            reps = F.l2_normalize(encode_grids(encoder, grids)).data.astype(np.float64)
            sims.append((reps[1:] * reps[:1]).sum(-1).mean())
    return float(np.mean(sims))


# -- fine-tuning --------------------------------------------------------------------------


class ClassifierHead:
    """Affine layer + softmax, optionally preceded by fixed feature standardization."""

    def __init__(self, dim: int, classes: int, rng: np.random.Generator):
        self.weight = parameter(rng.normal(0.0, 1.0 / math.sqrt(dim), (dim, classes)))
        self.bias = parameter(np.zeros(classes))
        self.feature_mean = np.zeros(dim, np.float32)
        self.feature_scale = np.ones(dim, np.float32)

    @property
    def classes(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def fit_standardizer(self, features: np.ndarray) -> None:
        self.feature_mean = features.mean(axis=0).astype(np.float32)
        self.feature_scale = (1.0 / (features.std(axis=0) + 1e-6)).astype(np.float32)

    def logits(self, features: Tensor) -> Tensor:
        z = (features - Tensor(self.feature_mean)) * Tensor(self.feature_scale)
        return F.linear(z, self.weight, self.bias)

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict(
            [
                ("weight", self.weight.data.copy()),
                ("bias", self.bias.data.copy()),
                ("feature_mean", self.feature_mean.copy()),
                ("feature_scale", self.feature_scale.copy()),
            ]
        )

    def load(self, state) -> None:
        self.weight.data = np.asarray(state["weight"], np.float32).copy()
        self.bias.data = np.asarray(state["bias"], np.float32).copy()
        self.feature_mean = np.asarray(state["feature_mean"], np.float32).copy()
        self.feature_scale = np.asarray(state["feature_scale"], np.float32).copy()


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    logp = F.log_softmax(logits, axis=-1)
    picked = take(logp, (np.arange(len(labels)), np.asarray(labels, dtype=np.int64)))
    return -picked.mean()


def train_head(
    features: np.ndarray,
    labels: Sequence[int],
    classes: int,
    lr: float = 0.1,
    epochs: int = 200,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
    standardize: bool = True,
    seed: int = 0,
) -> ClassifierHead:
    """Full-batch softmax regression on fixed features."""
    features = np.asarray(features, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    head = ClassifierHead(features.shape[1], classes, stream(seed, "head"))
    if standardize:
        head.fit_standardizer(features)
    opt = SGD(head.parameters(), lr, momentum, weight_decay)
    x = Tensor(features)
    for _ in range(epochs):
        opt.zero_grad()
        cross_entropy(head.logits(x), labels).backward()
        opt.step()
    return head


def predict_head(head: ClassifierHead, features: np.ndarray) -> np.ndarray:
    with no_grad():
        return F.softmax(head.logits(Tensor(np.asarray(features, np.float32))), axis=-1).data


def _resolve_checkpoint(cfg: FinetuneConfig):
    if cfg.checkpoint is None:
        encoder, _ = init_models(cfg.model, cfg.seed)
        return cfg.model, encoder
    ckpt = cfg.checkpoint if isinstance(cfg.checkpoint, Checkpoint) else load_checkpoint(cfg.checkpoint)
    model_cfg, encoder, _ = restore_models(ckpt)
    return model_cfg, encoder


def finetune(dataset: Sequence[tuple[np.ndarray, int]], cfg: FinetuneConfig) -> Checkpoint:
    """Append a classifier head to the encoder and train with cross-entropy.

    The autoregressor is not carried over. With ``freeze`` the encoder is only
    evaluated, so this is a linear probe.
    """
    images = [img for img, _ in dataset]
    labels = np.asarray([lab for _, lab in dataset], dtype=np.int64)
    if len(images) == 0:
        raise ValueError("fine-tuning needs a non-empty dataset")
    if labels.min() < 0 or labels.max() >= cfg.classes:
        raise ValueError(f"labels must lie in [0, {cfg.classes}); got range [{labels.min()}, {labels.max()}]")
    model_cfg, encoder = _resolve_checkpoint(cfg)
    spec = model_cfg.grid
    config = {"kind": "finetune", "model": model_cfg.to_dict(), "finetune": _finetune_dict(cfg)}
    if cfg.freeze:
        with no_grad():
            feats = image_features(encoder, images, spec).data
        head = train_head(
            feats, labels, cfg.classes, cfg.lr, cfg.epochs, cfg.momentum, cfg.weight_decay, cfg.standardize, cfg.seed
        )
    else:
        head = ClassifierHead(encoder.dim, cfg.classes, stream(cfg.seed, "head"))
        if cfg.standardize:
            with no_grad():
                head.fit_standardizer(image_features(encoder, images, spec).data)
        opt = SGD(encoder.parameters() + head.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
        order_rng = stream(cfg.seed, "order")
        bs = cfg.batch_size or len(images)
        for _ in range(cfg.epochs):
            order = order_rng.permutation(len(images))
            for start in range(0, len(order), bs):
                idx = order[start:start + bs]
                opt.zero_grad()
                feats = image_features(encoder, [images[i] for i in idx], spec)
                cross_entropy(head.logits(feats), labels[idx]).backward()
                opt.step()
    ckpt = models_checkpoint(encoder, None, config)
    for name, value in head.state().items():
        ckpt.params["head." + name] = value
    return ckpt


def _finetune_dict(cfg: FinetuneConfig) -> dict:
    d = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg) if f.name not in ("model", "checkpoint")}
    d["checkpoint"] = cfg.checkpoint if isinstance(cfg.checkpoint, str) else None
    return d


def classify(ckpt: Checkpoint, images: Sequence[np.ndarray]) -> np.ndarray:
    """Class probabilities from a fine-tuned checkpoint."""
    model_cfg, encoder, _ = restore_models(ckpt)
    head_state = ckpt.subset("head.")
    head = ClassifierHead(encoder.dim, head_state["weight"].shape[1], np.random.default_rng(0))
    head.load(head_state)
    with no_grad():
        feats = image_features(encoder, images, model_cfg.grid).data
    return predict_head(head, feats)


def linear_probe(
    encoder: Encoder,
    spec: GridSpec,
    train: Sequence[tuple[np.ndarray, int]],
    test: Sequence[tuple[np.ndarray, int]],
    classes: int,
    epochs: int = 300,
    lr: float = 0.1,
    weight_decay: float = 1e-3,
    seed: int = 0,
) -> dict:
    """Frozen-encoder probe accuracy on a held-out split."""
    with no_grad():
        f_train = image_features(encoder, [x for x, _ in train], spec).data
        f_test = image_features(encoder, [x for x, _ in test], spec).data
    y_train = np.array([y for _, y in train])
    y_test = np.array([y for _, y in test])
    head = train_head(f_train, y_train, classes, lr, epochs, weight_decay=weight_decay, seed=seed)
    train_acc = float((predict_head(head, f_train).argmax(1) == y_train).mean())
    test_acc = float((predict_head(head, f_test).argmax(1) == y_test).mean())
    return {"train_accuracy": train_acc, "test_accuracy": test_acc}
