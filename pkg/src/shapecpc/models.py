"""Patch encoder and attention-based target predictor."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import functional as F
from .imaging import GridSpec, PatchGrid
from .tensor import DimensionError, Tensor, concatenate, parameter, swapaxes

PADDING_MODES = ("direct", "pad_to_full")


class Module:
    """Holds named float32 parameters; subclasses register them in ``self.params``."""

    def __init__(self):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        return OrderedDict((prefix + k, v) for k, v in self.params.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in self.params.items():
            value = np.asarray(state[name], dtype=np.float32)
            if value.shape != p.shape:
                raise DimensionError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.copy()


# -- encoder ----------------------------------------------------------------------


@dataclass(frozen=True)
class EncoderConfig:
    channels: tuple = (16, 32, 64)
    kernel: int = 3
    stride: int = 2
    padding_mode: str = "direct"
    normalize: bool = True

    def __post_init__(self):
        if not self.channels or min(self.channels) < 1:
            raise ValueError(f"channels must be non-empty positive ints, got {self.channels}")
        if self.kernel < 1 or self.stride < 1:
            raise ValueError("kernel and stride must be >= 1")
        if self.padding_mode not in PADDING_MODES:
            raise ValueError(f"padding_mode must be one of {PADDING_MODES}, got {self.padding_mode!r}")

    @property
    def dim(self) -> int:
        return self.channels[-1]


class Encoder(Module):
    """Conv stack, global mean pool and L2 normalization for one patch."""

    def __init__(self, cfg: EncoderConfig, grid: GridSpec, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.grid = grid
        in_ch = 3
        for i, out_ch in enumerate(cfg.channels):
            fan_in = in_ch * cfg.kernel * cfg.kernel
            self.params[f"conv{i}.weight"] = parameter(rng.normal(0.0, math.sqrt(2.0 / fan_in), (out_ch, in_ch, cfg.kernel, cfg.kernel)))
            self.params[f"conv{i}.bias"] = parameter(np.zeros(out_ch))
            in_ch = out_ch

    @property
    def dim(self) -> int:
        return self.cfg.dim

    def features(self, x: Tensor) -> Tensor:
        """Pre-normalization vectors for an N×3×H×W batch."""
        n_stages = len(self.cfg.channels)
        for i in range(n_stages):
            x = F.conv2d(x, self.params[f"conv{i}.weight"], self.cfg.stride, self.cfg.kernel // 2)
            x = x + self.params[f"conv{i}.bias"].reshape(-1, 1, 1)
            if i < n_stages - 1:
                x = x.relu()
        return F.mean_pool_global(x)

    def __call__(self, patches, offsets=None) -> Tensor:
        """Encode N×p×p×3 patches into N×d vectors.

        ``offsets`` gives each patch's (row, col) pixel origin; with the
        ``pad_to_full`` mode the patch is zero-padded to the full image side at
        that origin (top-left when omitted).
        """
        arr = patches.data if isinstance(patches, Tensor) else np.asarray(patches, dtype=np.float32)
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise DimensionError(f"patches must be N×p×p×3, got {arr.shape}")
        p = self.grid.patch_side
        if arr.shape[1:3] != (p, p):
            raise DimensionError(f"patches are {arr.shape[1]}x{arr.shape[2]}, grid expects {p}x{p}")
        x = Tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))
        if self.cfg.padding_mode == "pad_to_full":
            x = self._pad_to_full(x, offsets)
        vec = self.features(x)
        return F.l2_normalize(vec) if self.cfg.normalize else vec

    def _pad_to_full(self, x: Tensor, offsets) -> Tensor:
        S, p = self.grid.image_side, self.grid.patch_side
        n = x.shape[0]
        offsets = np.zeros((n, 2), dtype=int) if offsets is None else np.asarray(offsets, dtype=int).reshape(n, 2)
        padded = [F.pad2d(x[i:i + 1], r, S - p - r, c, S - p - c) for i, (r, c) in enumerate(offsets)]
        return concatenate(padded, axis=0)


def grid_offsets(spec: GridSpec) -> np.ndarray:
    s = spec.grid_side
    rows, cols = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    return np.stack([rows.ravel(), cols.ravel()], axis=1) * spec.stride


def encode_patch(encoder: Encoder, patch, offset=None) -> Tensor:
    offsets = None if offset is None else [offset]
    return encoder(np.asarray(patch, dtype=np.float32)[None], offsets).reshape(encoder.dim)


def encode_grids(encoder: Encoder, grids) -> Tensor:
    """Encode several same-spec grids at once into G×(s·s)×d, row-major cells."""
    spec = grids[0].spec
    s, p = spec.grid_side, spec.patch_side
    stacked = np.concatenate([g.patches.reshape(s * s, p, p, 3) for g in grids], axis=0)
    offsets = np.tile(grid_offsets(spec), (len(grids), 1))
    return encoder(stacked, offsets).reshape(len(grids), s * s, encoder.dim)


def encode_grid(encoder: Encoder, grid: PatchGrid) -> Tensor:
    s = grid.spec.grid_side
    return encode_grids(encoder, [grid]).reshape(s, s, encoder.dim)


# -- autoregressor ------------------------------------------------------------------


@dataclass(frozen=True)
class AutoregressorConfig:
    layers: int = 2
    heads: int = 4
    ff_width: int = 128
    normalize: bool = True

    def __post_init__(self):
        if self.layers < 1 or self.heads < 1 or self.ff_width < 1:
            raise ValueError("layers, heads and ff_width must be >= 1")


TRAIN_ROLE, QUERY_ROLE = 0, 1


class Autoregressor(Module):
    """Pre-norm transformer over [training tokens ‖ target queries].

    Training tokens are encoded patch vectors plus a learned embedding of
    their grid cell. Each target cell contributes one query token made of its
    cell embedding and a query-role embedding; the final query states are the
    predictions, so output order follows the requested target order.
    """

    def __init__(self, cfg: AutoregressorConfig, dim: int, grid_side: int, rng: np.random.Generator):
        super().__init__()
        if dim % cfg.heads:
            raise ValueError(f"model width {dim} is not divisible by {cfg.heads} heads")
        self.cfg = cfg
        self.dim = dim
        self.grid_side = grid_side
        scale = 1.0 / math.sqrt(dim)
        P = self.params
        P["pos"] = parameter(rng.normal(0.0, scale, (grid_side * grid_side, dim)))
        P["role"] = parameter(rng.normal(0.0, scale, (2, dim)))
        for layer in range(cfg.layers):
            pre = f"layer{layer}."
            P[pre + "ln1.gain"] = parameter(np.ones(dim))
            P[pre + "ln1.bias"] = parameter(np.zeros(dim))
            for name in ("q", "k", "v", "o"):
                P[pre + f"w{name}"] = parameter(rng.normal(0.0, scale, (dim, dim)))
                P[pre + f"b{name}"] = parameter(np.zeros(dim))
            P[pre + "ln2.gain"] = parameter(np.ones(dim))
            P[pre + "ln2.bias"] = parameter(np.zeros(dim))
            P[pre + "ff1.weight"] = parameter(rng.normal(0.0, scale, (dim, cfg.ff_width)))
            P[pre + "ff1.bias"] = parameter(np.zeros(cfg.ff_width))
            P[pre + "ff2.weight"] = parameter(rng.normal(0.0, 1.0 / math.sqrt(cfg.ff_width), (cfg.ff_width, dim)))
            P[pre + "ff2.bias"] = parameter(np.zeros(dim))
        P["final_ln.gain"] = parameter(np.ones(dim))
        P["final_ln.bias"] = parameter(np.zeros(dim))
        P["out.weight"] = parameter(rng.normal(0.0, scale, (dim, dim)))
        P["out.bias"] = parameter(np.zeros(dim))

    def _self_attention(self, h: Tensor, pre: str) -> Tensor:
        P = self.params
        b, t, d = h.shape
        heads = self.cfg.heads

        def split(x):
            return swapaxes(x.reshape(b, t, heads, d // heads), 1, 2)

        q = split(F.linear(h, P[pre + "wq"], P[pre + "bq"]))
        k = split(F.linear(h, P[pre + "wk"], P[pre + "bk"]))
        v = split(F.linear(h, P[pre + "wv"], P[pre + "bv"]))
        mixed = swapaxes(F.attention(q, k, v), 1, 2).reshape(b, t, d)
        return F.linear(mixed, P[pre + "wo"], P[pre + "bo"])

    def __call__(self, train_reps: Tensor, train_cells, target_cells) -> Tensor:
        """Predict B×n_target×d vectors from B×n_train×d training reps.

        ``train_cells`` and ``target_cells`` are flat grid indices
        (``row * grid_side + col``) of shape B×n_train and B×n_target.
        """
        P = self.params
        train_cells = np.asarray(train_cells, dtype=np.int64)
        target_cells = np.asarray(target_cells, dtype=np.int64)
        n_cells = self.grid_side * self.grid_side
        for cells in (train_cells, target_cells):
            if cells.size and (cells.min() < 0 or cells.max() >= n_cells):
                raise IndexError(f"grid cell outside the {self.grid_side}x{self.grid_side} positional table")
        if train_reps.ndim != 3 or train_reps.shape[:2] != train_cells.shape or train_reps.shape[2] != self.dim:
            raise DimensionError(f"train reps {train_reps.shape} do not match cells {train_cells.shape} and width {self.dim}")
        n_train = train_cells.shape[1]
        inputs = train_reps + F.embedding(P["pos"], train_cells) + P["role"][TRAIN_ROLE]
        queries = F.embedding(P["pos"], target_cells) + P["role"][QUERY_ROLE]
        h = concatenate([inputs, queries], axis=1)
        for layer in range(self.cfg.layers):
            pre = f"layer{layer}."
            h = h + self._self_attention(F.layer_norm(h, P[pre + "ln1.gain"], P[pre + "ln1.bias"]), pre)
            z = F.layer_norm(h, P[pre + "ln2.gain"], P[pre + "ln2.bias"])
            z = F.linear(F.linear(z, P[pre + "ff1.weight"], P[pre + "ff1.bias"]).relu(), P[pre + "ff2.weight"], P[pre + "ff2.bias"])
            h = h + z
        out = F.layer_norm(h[:, n_train:], P["final_ln.gain"], P["final_ln.bias"])
        out = F.linear(out, P["out.weight"], P["out.bias"])
        return F.l2_normalize(out) if self.cfg.normalize else out


def predict_targets(ar: Autoregressor, train_reps: Tensor, train_coords, target_coords) -> Tensor:
    """Single-sequence form: k²×d reps and (row, col) lists to n_target×d."""
    s = ar.grid_side
    train_cells = [[r * s + c for r, c in train_coords]]
    target_cells = [[r * s + c for r, c in target_coords]]
    out = ar(train_reps.reshape(1, *train_reps.shape), train_cells, target_cells)
    return out.reshape(out.shape[1], out.shape[2])


# -- whole model -----------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    autoregressor: AutoregressorConfig = field(default_factory=AutoregressorConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"]["channels"] = list(self.encoder.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        enc = dict(d["encoder"])
        enc["channels"] = tuple(enc["channels"])
        return cls(GridSpec(**d["grid"]), EncoderConfig(**enc), AutoregressorConfig(**d["autoregressor"]))


def build_models(cfg: ModelConfig, rng: np.random.Generator) -> tuple[Encoder, Autoregressor]:
    encoder = Encoder(cfg.encoder, cfg.grid, rng)
    ar = Autoregressor(cfg.autoregressor, cfg.encoder.dim, cfg.grid.grid_side, rng)
    return encoder, ar
