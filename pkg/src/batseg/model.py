"""
    batseg.model
    ~~~~~~~~~~~~

    The boundary-aware transformer: a strided convolutional stem turns the
    image into a sequence of patch embeddings, encoder layers transform it,
    each layer ending in a boundary-wise attention gate (BAG), a learnable
    query embedding gates the result once more, and a head of parallel
    dilated convolutions predicts the segmentation.

    All the arrays of a model live in a flat :class:`ParameterSet`, keyed by
    dotted paths (``layers.0.attn.wq``). Gradients are dictionaries with the
    same keys.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterator, Mapping, NamedTuple, Sequence

import numpy as np

from . import nn
from .config import ModelConfig
from .errors import ContractError, NumericalError
from .loss import (
    LossBreakdown,
    dice_loss_grad,
    map_ce_loss_grad,
    total_loss,
)
from .nn import Array, ConvGeometry

Gradients = dict[str, Array]

_STEM = ConvGeometry(stride=2, padding=1)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Shape of every parameter, in declaration order."""
    c = cfg.channels
    shapes: dict[str, tuple[int, ...]] = {}

    widths = (3, *cfg.stem_channels, c)
    for i, (cin, cout) in enumerate(zip(widths[:-1], widths[1:])):
        shapes[f"stem.{i}.weight"] = (3, 3, cin, cout)
        shapes[f"stem.{i}.bias"] = (cout,)

    if cfg.variant != "cnn":
        shapes["pos_embedding"] = (cfg.sequence_length, c)
        for i in range(cfg.layers):
            p = f"layers.{i}"
            shapes[f"{p}.norm1.gamma"] = (c,)
            shapes[f"{p}.norm1.beta"] = (c,)
            for name in ("q", "k", "v", "o"):
                shapes[f"{p}.attn.w{name}"] = (c, c)
                shapes[f"{p}.attn.b{name}"] = (c,)
            shapes[f"{p}.norm2.gamma"] = (c,)
            shapes[f"{p}.norm2.beta"] = (c,)
            shapes[f"{p}.mlp.w1"] = (c, cfg.hidden)
            shapes[f"{p}.mlp.b1"] = (cfg.hidden,)
            shapes[f"{p}.mlp.w2"] = (cfg.hidden, c)
            shapes[f"{p}.mlp.b2"] = (c,)
            if cfg.boundary_gates:
                shapes[f"{p}.gate.weight"] = (c, 1)
                shapes[f"{p}.gate.bias"] = (1,)
        if cfg.boundary_gates:
            shapes["query"] = (c,)

    for r in cfg.dilation_rates:
        shapes[f"head.rate{r}.weight"] = (3, 3, c, cfg.branch_channels)
        shapes[f"head.rate{r}.bias"] = (cfg.branch_channels,)
    shapes["head.proj.weight"] = (len(cfg.dilation_rates) * cfg.branch_channels, 1)
    shapes["head.proj.bias"] = (1,)
    return shapes


def parameter_group(path: str) -> str:
    """``layers.2.attn.wq`` -> ``layers.2.attn``; ``query`` -> ``query``."""
    return path.rpartition(".")[0] or path


_OFFSETS = {"bias", "beta", "bq", "bk", "bv", "bo", "b1", "b2"}


def _is_offset(path: str) -> bool:
    return path.rpartition(".")[2] in _OFFSETS


@dataclass(eq=False)
class ParameterSet(Mapping[str, Array]):
    """Every learnable array of a model, keyed by path."""

    config: ModelConfig
    arrays: dict[str, Array] = field(repr=False)

    def __post_init__(self):
        expected = parameter_shapes(self.config)
        if list(self.arrays) != list(expected):
            raise ContractError(
                "parameter paths do not match the configuration: "
                f"{sorted(set(self.arrays) ^ set(expected))}"
            )
        for path, shape in expected.items():
            if self.arrays[path].shape != shape:
                raise ContractError(
                    f"{path}: expected shape {shape}, got {self.arrays[path].shape}"
                )

    def __getitem__(self, path: str) -> Array:
        return self.arrays[path]

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def __len__(self) -> int:
        return len(self.arrays)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def groups(self) -> list[str]:
        return list(dict.fromkeys(map(parameter_group, self.arrays)))

    def copy(self) -> ParameterSet:
        return ParameterSet(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def zeros_like(self) -> Gradients:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    def check_finite(self):
        for path, value in self.arrays.items():
            if not np.isfinite(value).all():
                raise NumericalError("non-finite parameter", path=path)


def init_parameters(cfg: ModelConfig, seed: int | np.random.Generator = 0) -> ParameterSet:
    """Zero-mean normal weights, zero offsets and unit normalization gains.

    Stem kernels use He scaling, std sqrt(2 / fan_in), so that the patch
    embeddings keep unit scale through the GELUs; every other weight has
    std ``cfg.init_std``.
    """
    rng = np.random.default_rng(seed)
    arrays = {}
    for path, shape in parameter_shapes(cfg).items():
        if path.endswith(".gamma"):
            arrays[path] = np.ones(shape)
        elif _is_offset(path):
            arrays[path] = np.zeros(shape)
        elif path.startswith("stem."):
            fan_in = math.prod(shape[:-1])
            arrays[path] = rng.normal(0.0, math.sqrt(2 / fan_in), size=shape)
        else:
            arrays[path] = rng.normal(0.0, cfg.init_std, size=shape)
    return ParameterSet(cfg, arrays)


# Stem and sequentialization


def _batched(image: Array, ndim: int) -> tuple[Array, bool]:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == ndim - 1:
        return image[None], True
    if image.ndim != ndim:
        raise ContractError(f"expected {ndim - 1}D or {ndim}D input, got {image.shape}")
    return image, False


def _check_image(images: Array, cfg: ModelConfig):
    if images.shape[1:] != (cfg.image_side, cfg.image_side, 3):
        raise ContractError(
            f"expected images of {cfg.image_side}x{cfg.image_side}x3, "
            f"got {images.shape[1:]}"
        )


class StemCache(NamedTuple):
    inputs: list[Array]
    pre: list[Array]


def _stem(images: Array, params: ParameterSet) -> tuple[Array, StemCache]:
    cache = StemCache([], [])
    x = images
    for i in range(4):
        pre = nn.conv2d(x, params[f"stem.{i}.weight"], params[f"stem.{i}.bias"], _STEM)
        cache.inputs.append(x)
        cache.pre.append(pre)
        x = nn.gelu(pre)
    return x, cache


def _stem_backward(
    dout: Array, cache: StemCache, params: ParameterSet, grads: Gradients
):
    dx = dout
    for i in reversed(range(4)):
        dpre = dx * nn.gelu_grad(cache.pre[i])
        dx, dw, db = nn.conv2d_backward(
            dpre, cache.inputs[i], params[f"stem.{i}.weight"], _STEM
        )
        grads[f"stem.{i}.weight"] += dw
        grads[f"stem.{i}.bias"] += db


def conv_stem(image: Array, params: ParameterSet) -> Array:
    """(H, W, 3) image(s) to (H/16, W/16, C) feature grid(s)."""
    images, single = _batched(image, 4)
    _check_image(images, params.config)
    grid, _ = _stem(images, params)
    return grid[0] if single else grid


def sequentialize(feat: Array, pos: Array) -> Array:
    """Row-major flattening of the grid plus the positional embedding."""
    *lead, rows, cols, channels = feat.shape
    if pos.shape != (rows * cols, channels):
        raise ContractError(
            f"positional embedding {pos.shape} for a {rows}x{cols}x{channels} grid"
        )
    return feat.reshape(*lead, rows * cols, channels) + pos


# Encoder


class AttentionCache(NamedTuple):
    z: Array
    u: Array
    norm: nn.NormCache
    q: Array
    k: Array
    v: Array
    weights: Array
    merged: Array


def _msa(z: Array, params: ParameterSet, prefix: str) -> tuple[Array, AttentionCache]:
    heads = params.config.heads
    u, norm = nn.layer_norm(z, params[f"{prefix}.norm1.gamma"], params[f"{prefix}.norm1.beta"])
    q, k, v = (
        nn.split_heads(
            nn.linear(u, params[f"{prefix}.attn.w{n}"], params[f"{prefix}.attn.b{n}"]),
            heads,
        )
        for n in "qkv"
    )
    scale = 1 / math.sqrt(q.shape[-1])
    weights = nn.softmax(q @ k.swapaxes(-1, -2) * scale)
    merged = nn.merge_heads(weights @ v)
    out = nn.linear(merged, params[f"{prefix}.attn.wo"], params[f"{prefix}.attn.bo"])
    return out, AttentionCache(z, u, norm, q, k, v, weights, merged)


def _msa_backward(
    dout: Array, cache: AttentionCache, params: ParameterSet, prefix: str, grads: Gradients
) -> Array:
    a = f"{prefix}.attn"
    heads = params.config.heads
    dmerged, dw, db = nn.linear_backward(dout, cache.merged, params[f"{a}.wo"])
    grads[f"{a}.wo"] += dw
    grads[f"{a}.bo"] += db

    dctx = nn.split_heads(dmerged, heads)
    dweights = dctx @ cache.v.swapaxes(-1, -2)
    dv = cache.weights.swapaxes(-1, -2) @ dctx
    dscores = nn.softmax_backward(dweights, cache.weights)
    scale = 1 / math.sqrt(cache.q.shape[-1])
    dq = dscores @ cache.k * scale
    dk = dscores.swapaxes(-1, -2) @ cache.q * scale

    du = np.zeros_like(cache.u)
    for n, d in zip("qkv", (dq, dk, dv)):
        dx, dw, db = nn.linear_backward(nn.merge_heads(d), cache.u, params[f"{a}.w{n}"])
        du += dx
        grads[f"{a}.w{n}"] += dw
        grads[f"{a}.b{n}"] += db

    dz, dgamma, dbeta = nn.layer_norm_backward(
        du, cache.norm, params[f"{prefix}.norm1.gamma"]
    )
    grads[f"{prefix}.norm1.gamma"] += dgamma
    grads[f"{prefix}.norm1.beta"] += dbeta
    return dz


def msa(z: Array, params: ParameterSet, layer: int = 0) -> Array:
    """Pre-normalized multi-head self-attention of encoder layer `layer`."""
    out, _ = _msa(np.asarray(z, dtype=np.float64), params, f"layers.{layer}")
    return out


def attention_weights(z: Array, params: ParameterSet, layer: int = 0) -> Array:
    """Softmax weights (..., heads, L, L) of encoder layer `layer`."""
    _, cache = _msa(np.asarray(z, dtype=np.float64), params, f"layers.{layer}")
    return cache.weights


class LayerCache(NamedTuple):
    attn: AttentionCache
    a: Array
    u2: Array
    norm2: nn.NormCache
    pre: Array
    hidden: Array
    v: Array
    gate: Array | None


def _encoder_layer(
    z: Array, params: ParameterSet, prefix: str
) -> tuple[Array, Array | None, LayerCache]:
    a, attn = _msa(z, params, prefix)
    if params.config.residual:
        a = z + a
    u2, norm2 = nn.layer_norm(a, params[f"{prefix}.norm2.gamma"], params[f"{prefix}.norm2.beta"])
    pre = nn.linear(u2, params[f"{prefix}.mlp.w1"], params[f"{prefix}.mlp.b1"])
    hidden = nn.gelu(pre)
    v = a + nn.linear(hidden, params[f"{prefix}.mlp.w2"], params[f"{prefix}.mlp.b2"])

    if not params.config.boundary_gates:
        return v, None, LayerCache(attn, a, u2, norm2, pre, hidden, v, None)

    gate = nn.sigmoid(
        nn.linear(v, params[f"{prefix}.gate.weight"], params[f"{prefix}.gate.bias"])
    )[..., 0]
    z_next = v + v * gate[..., None]
    return z_next, gate, LayerCache(attn, a, u2, norm2, pre, hidden, v, gate)


def _encoder_layer_backward(
    dz_next: Array,
    dgate: Array | None,
    cache: LayerCache,
    params: ParameterSet,
    prefix: str,
    grads: Gradients,
) -> Array:
    if cache.gate is None:
        dv = dz_next
    else:
        m = cache.gate
        dv = dz_next * (1 + m[..., None])
        dm = (dz_next * cache.v).sum(axis=-1)
        if dgate is not None:
            dm = dm + dgate
        dlogit = (dm * m * (1 - m))[..., None]
        dx, dw, db = nn.linear_backward(dlogit, cache.v, params[f"{prefix}.gate.weight"])
        dv = dv + dx
        grads[f"{prefix}.gate.weight"] += dw
        grads[f"{prefix}.gate.bias"] += db

    dhidden, dw, db = nn.linear_backward(dv, cache.hidden, params[f"{prefix}.mlp.w2"])
    grads[f"{prefix}.mlp.w2"] += dw
    grads[f"{prefix}.mlp.b2"] += db
    dpre = dhidden * nn.gelu_grad(cache.pre)
    du2, dw, db = nn.linear_backward(dpre, cache.u2, params[f"{prefix}.mlp.w1"])
    grads[f"{prefix}.mlp.w1"] += dw
    grads[f"{prefix}.mlp.b1"] += db
    da, dgamma, dbeta = nn.layer_norm_backward(
        du2, cache.norm2, params[f"{prefix}.norm2.gamma"]
    )
    grads[f"{prefix}.norm2.gamma"] += dgamma
    grads[f"{prefix}.norm2.beta"] += dbeta

    da = dv + da
    dz = _msa_backward(da, cache.attn, params, prefix, grads)
    return dz + da if params.config.residual else dz


def transformed_feature(z: Array, params: ParameterSet, layer: int = 0) -> Array:
    """V = A + MLP(A), the input of the layer's gate, where A is MSA(Z)
    plus Z when the layer is residual."""
    _, _, cache = _encoder_layer(np.asarray(z, dtype=np.float64), params, f"layers.{layer}")
    return cache.v


def encoder_layer(
    z_prev: Array, params: ParameterSet, layer: int = 0
) -> tuple[Array, Array | None]:
    """One encoder layer; returns the next sequence and the (..., L)
    boundary map of its gate (None without gates)."""
    z_next, gate, _ = _encoder_layer(
        np.asarray(z_prev, dtype=np.float64), params, f"layers.{layer}"
    )
    return z_next, gate


class QueryCache(NamedTuple):
    z: Array
    gate: Array


def _query_bag(z: Array, q: Array) -> tuple[Array, Array, QueryCache]:
    if q.shape != z.shape[-1:]:
        raise ContractError(f"query of shape {q.shape} for {z.shape[-1]} channels")
    gate = nn.sigmoid(z @ q / math.sqrt(q.size))
    return z + z * gate[..., None], gate, QueryCache(z, gate)


def _query_bag_backward(
    dz_out: Array, dgate: Array | None, cache: QueryCache, q: Array, grads: Gradients
) -> Array:
    m = cache.gate
    dz = dz_out * (1 + m[..., None])
    dm = (dz_out * cache.z).sum(axis=-1)
    if dgate is not None:
        dm = dm + dgate
    dscore = dm * m * (1 - m) / math.sqrt(q.size)
    grads["query"] += (dscore[..., None] * cache.z).reshape(-1, q.size).sum(axis=0)
    return dz + dscore[..., None] * q


def query_bag(z_n: Array, q: Array) -> tuple[Array, Array]:
    """Gate the sequence by its scaled similarity to the query embedding."""
    z_out, gate, _ = _query_bag(np.asarray(z_n, dtype=np.float64), np.asarray(q))
    return z_out, gate


# Prediction head


class HeadCache(NamedTuple):
    grid: Array
    concat: Array
    prediction: Array


def _atrous_head(z: Array, params: ParameterSet) -> tuple[Array, HeadCache]:
    cfg = params.config
    n = z.shape[0]
    grid = z.reshape(n, cfg.grid_side, cfg.grid_side, cfg.channels)
    concat = np.concatenate(
        [
            nn.conv2d(
                grid,
                params[f"head.rate{r}.weight"],
                params[f"head.rate{r}.bias"],
                ConvGeometry(dilation=r, padding=r),
            )
            for r in cfg.dilation_rates
        ],
        axis=-1,
    )
    logits = nn.linear(concat, params["head.proj.weight"], params["head.proj.bias"])
    prediction = nn.sigmoid(nn.upsample(logits[..., 0], cfg.patch_side))
    return prediction, HeadCache(grid, concat, prediction)


def _atrous_head_backward(
    dprediction: Array, cache: HeadCache, params: ParameterSet, grads: Gradients
) -> Array:
    cfg = params.config
    p = cache.prediction
    dlogits = nn.upsample_backward(dprediction * p * (1 - p), cfg.patch_side)
    dconcat, dw, db = nn.linear_backward(
        dlogits[..., None], cache.concat, params["head.proj.weight"]
    )
    grads["head.proj.weight"] += dw
    grads["head.proj.bias"] += db

    dgrid = np.zeros_like(cache.grid)
    width = cfg.branch_channels
    for i, r in enumerate(cfg.dilation_rates):
        dx, dw, db = nn.conv2d_backward(
            dconcat[..., i * width : (i + 1) * width],
            cache.grid,
            params[f"head.rate{r}.weight"],
            ConvGeometry(dilation=r, padding=r),
        )
        dgrid += dx
        grads[f"head.rate{r}.weight"] += dw
        grads[f"head.rate{r}.bias"] += db
    return dgrid.reshape(dgrid.shape[0], -1, cfg.channels)


def atrous_head(z: Array, params: ParameterSet) -> Array:
    """(L, C) sequence(s) to (H, W) probability map(s)."""
    z, single = _batched(z, 3)
    prediction, _ = _atrous_head(z, params)
    return prediction[0] if single else prediction


# Full model


@dataclass
class Forward:
    """Outputs of a forward pass, batched ``(N, ...)``.

    `maps` holds the n+1 gate maps (empty without gates), `attention` the
    softmax weights of every encoder layer.
    """

    prediction: Array
    maps: list[Array]
    attention: list[Array]
    tape: dict[str, Any] = field(repr=False, default_factory=dict)


def forward(image: Array, params: ParameterSet) -> Forward:
    cfg = params.config
    images, _ = _batched(image, 4)
    _check_image(images, cfg)
    tape: dict[str, Any] = {}

    grid, tape["stem"] = _stem(images, params)
    if cfg.variant == "cnn":
        z = grid.reshape(grid.shape[0], -1, cfg.channels)
    else:
        z = sequentialize(grid, params["pos_embedding"])

    maps, attention = [], []
    if cfg.variant != "cnn":
        for i in range(cfg.layers):
            z, gate, tape[f"layers.{i}"] = _encoder_layer(z, params, f"layers.{i}")
            attention.append(tape[f"layers.{i}"].attn.weights)
            if gate is not None:
                maps.append(gate)
        if cfg.boundary_gates:
            z, gate, tape["query"] = _query_bag(z, params["query"])
            maps.append(gate)

    prediction, tape["head"] = _atrous_head(z, params)
    return Forward(prediction, maps, attention, tape)


def backward(
    fwd: Forward,
    params: ParameterSet,
    d_prediction: Array,
    d_maps: Sequence[Array | None] | None = None,
) -> Gradients:
    """Parameter gradients, given the loss gradients with respect to the
    prediction and to each gate map (None where a map has no loss)."""
    cfg = params.config
    if d_maps is None:
        d_maps = [None] * cfg.map_count
    if len(d_maps) != cfg.map_count:
        raise ContractError(f"expected {cfg.map_count} map gradients, got {len(d_maps)}")

    grads = params.zeros_like()
    tape = fwd.tape
    dz = _atrous_head_backward(
        np.reshape(d_prediction, fwd.prediction.shape), tape["head"], params, grads
    )
    if cfg.variant != "cnn":
        if cfg.boundary_gates:
            dz = _query_bag_backward(dz, d_maps[-1], tape["query"], params["query"], grads)
        for i in reversed(range(cfg.layers)):
            dgate = d_maps[i] if cfg.boundary_gates else None
            dz = _encoder_layer_backward(
                dz, dgate, tape[f"layers.{i}"], params, f"layers.{i}", grads
            )
        grads["pos_embedding"] += dz.sum(axis=0)

    dgrid = dz.reshape(dz.shape[0], cfg.grid_side, cfg.grid_side, cfg.channels)
    _stem_backward(dgrid, tape["stem"], params, grads)

    for path, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericalError("non-finite gradient", path=path)
    return grads


class Objective(NamedTuple):
    breakdown: LossBreakdown
    value: float
    gradients: Gradients
    forward: Forward


def evaluate_objective(
    params: ParameterSet,
    images: Array,
    masks: Array,
    keymaps: Array,
    *,
    map_weight: float = 1.0,
) -> tuple[LossBreakdown, float, Forward]:
    """Batch-mean loss breakdown and objective value, without gradients."""
    fwd = forward(images, params)
    masks = np.asarray(masks).reshape(fwd.prediction.shape)
    keymaps = np.asarray(keymaps).reshape(fwd.prediction.shape[0], -1)
    items = [
        total_loss(
            masks[n],
            fwd.prediction[n],
            keymaps[n],
            [m[n] for m in fwd.maps],
            map_count=params.config.map_count,
        )
        for n in range(len(masks))
    ]
    value = float(np.mean([b.weighted(map_weight) for b in items]))
    return LossBreakdown.mean(items), value, fwd


def loss_and_gradients(
    params: ParameterSet,
    images: Array,
    masks: Array,
    keymaps: Array,
    *,
    map_weight: float = 1.0,
) -> Objective:
    """Mean over the batch of the per-sample objective and its gradients."""
    breakdown, value, fwd = evaluate_objective(
        params, images, masks, keymaps, map_weight=map_weight
    )
    if not math.isfinite(value):
        raise NumericalError("non-finite loss")

    n = fwd.prediction.shape[0]
    masks = np.asarray(masks).reshape(fwd.prediction.shape)
    keymaps = np.asarray(keymaps).reshape(n, -1)
    d_prediction = np.stack(
        [dice_loss_grad(masks[i], fwd.prediction[i]) for i in range(n)]
    ) / n
    d_maps = [
        np.stack([map_ce_loss_grad(keymaps[i], m[i]) for i in range(n)])
        * (map_weight / n)
        for m in fwd.maps
    ]
    return Objective(breakdown, value, backward(fwd, params, d_prediction, d_maps), fwd)
