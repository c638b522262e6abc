"""Lightweight ViT: patch embedding, pre-norm encoder and class-token head.

Every function accepts a leading batch axis; single images of shape
``(H, W)`` are handled by :func:`forward` as a batch of one.
"""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, RngState, Tensor
from .errors import ConfigError, ContractError, ShapeError


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 48
    patch_size: int = 16
    in_channels: int = 1
    embed_dim: int = 256
    num_heads: int = 2
    num_layers: int = 2
    mlp_ratio: int = 4
    dropout_p: float = 0.3
    num_classes: int = 10
    head_hidden_layers: int = 0
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("image_size", "patch_size", "in_channels", "embed_dim", "num_heads",
                     "num_layers", "mlp_ratio", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.head_hidden_layers < 0:
            raise ConfigError("head_hidden_layers must be >= 0")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.ln_eps <= 0:
            raise ConfigError("ln_eps must be positive")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.in_channels

    @property
    def hidden_dim(self) -> int:
        return self.mlp_ratio * self.embed_dim

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def layer_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Shapes of one encoder layer's tensors, keyed relative to ``layers.<l>.``."""
    d, h = config.embed_dim, config.hidden_dim
    shapes = {"ln1.gain": (d,), "ln1.bias": (d,)}
    for proj in "qkvo":
        shapes[f"attn.{proj}.weight"] = (d, d)
        shapes[f"attn.{proj}.bias"] = (d,)
    shapes.update({
        "ln2.gain": (d,), "ln2.bias": (d,),
        "ffn.fc1.weight": (h, d), "ffn.fc1.bias": (h,),
        "ffn.fc2.weight": (d, h), "ffn.fc2.bias": (d,),
    })
    return shapes


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every learnable tensor's name and shape, in canonical order."""
    d = config.embed_dim
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (d, config.patch_dim),
        "class_token": (d,),
        "pos_embed": (config.num_patches + 1, d),
    }
    for layer in range(config.num_layers):
        for key, shape in layer_shapes(config).items():
            shapes[f"layers.{layer}.{key}"] = shape
    for j in range(config.head_hidden_layers):
        shapes[f"head.hidden.{j}.weight"] = (d, d)
        shapes[f"head.hidden.{j}.bias"] = (d,)
    shapes["head.norm.gain"] = (d,)
    shapes["head.norm.bias"] = (d,)
    shapes["head.weight"] = (config.num_classes, d)
    shapes["head.bias"] = (config.num_classes,)
    return shapes


def count_params(config: ModelConfig) -> int:
    d, h, k = config.embed_dim, config.hidden_dim, config.num_classes
    per_layer = 4 * d + 4 * (d * d + d) + (h * d + h) + (d * h + d)
    embed = d * config.patch_dim + d + (config.num_patches + 1) * d
    head = config.head_hidden_layers * (d * d + d) + 2 * d + k * d + k
    return embed + config.num_layers * per_layer + head


class ModelParams(Mapping):
    """Ordered name -> Parameter table bound to a :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Parameter]):
        expected = param_shapes(config)
        if list(tensors) != list(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ShapeError(f"parameter table mismatch: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {tensors[name].shape}")
        self.config = config
        self._tensors = tensors

    def __getitem__(self, name: str) -> Parameter:
        return self._tensors[name]

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def parameters(self) -> list[Parameter]:
        return list(self._tensors.values())

    def layer(self, index: int) -> dict[str, Parameter]:
        prefix = f"layers.{index}."
        return {n[len(prefix):]: p for n, p in self._tensors.items() if n.startswith(prefix)}

    def zero_grads(self) -> None:
        ad.zero_grads(self._tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._tensors.items()}

    def assign(self, arrays: Mapping[str, np.ndarray]) -> None:
        """Copy values in place; shapes must match exactly."""
        for name, p in self._tensors.items():
            src = np.asarray(arrays[name], dtype=np.float64)
            if src.shape != p.shape:
                raise ShapeError(f"{name}: expected shape {p.shape}, got {src.shape}")
        for name, p in self._tensors.items():
            p.data[...] = arrays[name]

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: Mapping[str, np.ndarray]) -> "ModelParams":
        return cls(config, {n: Parameter(n, arrays[n]) for n in arrays})


INIT_STD = 0.02
TRUNCATION = 2.0


def _truncated_std_factor(bound: float) -> float:
    """Std of a unit normal truncated to [-bound, bound]."""
    pdf = math.exp(-0.5 * bound * bound) / math.sqrt(2.0 * math.pi)
    mass = math.erf(bound / math.sqrt(2.0))
    return math.sqrt(1.0 - 2.0 * bound * pdf / mass)


def init_params(config: ModelConfig, rng: RngState) -> ModelParams:
    """Seeded cold start.

    Weights and positions are truncated normals with standard deviation
    ``INIT_STD`` after truncation at +-2 underlying sigma; biases and the class
    token are zero and LayerNorm gains are one.
    """
    sigma = INIT_STD / _truncated_std_factor(TRUNCATION)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            value = np.ones(shape)
        elif name.endswith(".weight") or name == "pos_embed":
            value = rng.truncated_normal(shape, std=sigma, bound=TRUNCATION)
        else:
            value = np.zeros(shape)
        tensors[name] = Parameter(name, value)
    return ModelParams(config, tensors)


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def _batched_images(images, config: ModelConfig) -> np.ndarray:
    x = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
    s, c = config.image_size, config.in_channels
    if c == 1 and x.ndim >= 2 and x.shape[-2:] == (s, s):
        x = x[..., None]
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != (s, s, c):
        raise ShapeError(f"expected image(s) of shape ({s}, {s}) with {c} channel(s), "
                         f"got {np.shape(images)}")
    return x


def patchify(images, config: ModelConfig = ModelConfig()) -> Tensor:
    """Split images into non-overlapping patches, grid and pixels row-major.

    ``(H, W)`` gives ``(N, P*P*C)``; ``(B, H, W)`` gives ``(B, N, P*P*C)``.
    """
    single = np.ndim(images.data if isinstance(images, Tensor) else images) == 2
    x = _batched_images(images, config)
    b = x.shape[0]
    p, g = config.patch_size, config.image_size // config.patch_size
    t = ad.reshape(Tensor(x), (b, g, p, g, p, config.in_channels))
    t = ad.swapaxes(t, 2, 3)
    t = ad.reshape(t, (b, g * g, config.patch_dim))
    return t[0] if single else t


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    vector = x.ndim == 1
    if vector:
        x = ad.reshape(x, (1, x.shape[0]))
    y = ad.matmul(x, ad.swapaxes(weight, 0, 1))
    if vector:
        y = ad.reshape(y, (weight.shape[0],))
    return y if bias is None else y + bias


def embed_sequence(patches: Tensor, params: Mapping[str, Tensor], *, dropout_p: float = 0.0,
                   rng: RngState | None = None, training: bool = False) -> Tensor:
    """Project patches, prepend the class token and add positions."""
    single = patches.ndim == 2
    if single:
        patches = ad.reshape(patches, (1,) + patches.shape)
    w, cls, pos = params["patch_embed.weight"], params["class_token"], params["pos_embed"]
    b, n, pd = patches.shape
    if w.shape[1] != pd or pos.shape != (n + 1, w.shape[0]):
        raise ShapeError(f"patches {patches.shape} do not match patch_embed {w.shape} "
                         f"and pos_embed {pos.shape}")
    d = w.shape[0]
    z = ad.matmul(patches, ad.swapaxes(w, 0, 1))
    z0 = ad.broadcast_to(ad.reshape(cls, (1, 1, d)), (b, 1, d))
    y = ad.concat([z0, z], axis=1) + pos
    y = ad.dropout(y, dropout_p, rng, training)
    return y[0] if single else y


def mhsa(x: Tensor, layer: Mapping[str, Tensor], num_heads: int, *, dropout_p: float = 0.0,
         rng: RngState | None = None, training: bool = False,
         capture: list | None = None) -> Tensor:
    """Scaled dot-product self-attention over ``num_heads`` heads.

    If ``capture`` is a list, each call appends its attention weights
    ``(B, heads, T, T)`` as a numpy array.
    """
    single = x.ndim == 2
    if single:
        x = ad.reshape(x, (1,) + x.shape)
    b, t, d = x.shape
    if d % num_heads:
        raise ShapeError(f"embed dim {d} not divisible by {num_heads} heads")
    dh = d // num_heads

    def heads(name):
        proj = linear(x, layer[f"attn.{name}.weight"], layer[f"attn.{name}.bias"])
        return ad.swapaxes(ad.reshape(proj, (b, t, num_heads, dh)), 1, 2)

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = ad.matmul(q, ad.swapaxes(k, 2, 3)) * (1.0 / math.sqrt(dh))
    attn = ad.softmax_lastaxis(scores)
    if capture is not None:
        capture.append(attn.data.copy())
    attn = ad.dropout(attn, dropout_p, rng, training)
    out = ad.reshape(ad.swapaxes(ad.matmul(attn, v), 1, 2), (b, t, d))
    out = linear(out, layer["attn.o.weight"], layer["attn.o.bias"])
    out = ad.dropout(out, dropout_p, rng, training)
    return out[0] if single else out


def feed_forward(x: Tensor, layer: Mapping[str, Tensor], *, dropout_p: float = 0.0,
                 rng: RngState | None = None, training: bool = False) -> Tensor:
    h = ad.gelu(linear(x, layer["ffn.fc1.weight"], layer["ffn.fc1.bias"]))
    out = linear(h, layer["ffn.fc2.weight"], layer["ffn.fc2.bias"])
    return ad.dropout(out, dropout_p, rng, training)


def encoder_layer(y: Tensor, layer: Mapping[str, Tensor], config: ModelConfig, *,
                  rng: RngState | None = None, training: bool = False,
                  capture: list | None = None) -> Tensor:
    """Two pre-norm residual sublayers: attention, then feed-forward."""
    p, eps = config.dropout_p, config.ln_eps
    h = ad.layer_norm(y, layer["ln1.gain"], layer["ln1.bias"], eps)
    y = y + mhsa(h, layer, config.num_heads, dropout_p=p, rng=rng, training=training,
                 capture=capture)
    h = ad.layer_norm(y, layer["ln2.gain"], layer["ln2.bias"], eps)
    return y + feed_forward(h, layer, dropout_p=p, rng=rng, training=training)


def encode(y: Tensor, params: ModelParams, *, rng: RngState | None = None,
           training: bool = False, capture: list | None = None) -> Tensor:
    for index in range(params.config.num_layers):
        y = encoder_layer(y, params.layer(index), params.config, rng=rng, training=training,
                          capture=capture)
    return y


def classify(encoded: Tensor, params: ModelParams) -> Tensor:
    """Logits from the class-token row of the final token sequence."""
    cfg = params.config
    f0 = encoded[..., 0, :]
    for j in range(cfg.head_hidden_layers):
        f0 = ad.gelu(linear(f0, params[f"head.hidden.{j}.weight"], params[f"head.hidden.{j}.bias"]))
    f0 = ad.layer_norm(f0, params["head.norm.gain"], params["head.norm.bias"], cfg.ln_eps)
    return linear(f0, params["head.weight"], params["head.bias"])


def forward(images, params: ModelParams, *, rng: RngState | None = None,
            training: bool = False, capture: list | None = None) -> Tensor:
    """Logits ``(K,)`` for one image or ``(B, K)`` for a batch."""
    cfg = params.config
    raw = images.data if isinstance(images, Tensor) else np.asarray(images)
    single = raw.ndim == (2 if cfg.in_channels == 1 else 3)
    patches = patchify(raw if not single else raw[None], cfg)
    y = embed_sequence(patches, params, dropout_p=cfg.dropout_p, rng=rng, training=training)
    y = encode(y, params, rng=rng, training=training, capture=capture)
    logits = classify(y, params)
    return logits[0] if single else logits


def predict(logits) -> int | np.ndarray:
    """Argmax over the last axis; ties resolve to the lowest index."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    if z.shape[-1] < 1:
        raise ContractError("predict needs at least one logit")
    if not np.all(np.isfinite(z)):
        raise ContractError("predict got non-finite logits")
    idx = np.argmax(z, axis=-1)
    return int(idx) if z.ndim == 1 else idx
