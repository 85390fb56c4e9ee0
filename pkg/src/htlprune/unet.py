"""U-Net segmentation network and its classification-head twin."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


@dataclass
class ArchConfig:
    depth: int = 2
    base_channels: int = 8
    input_channels: int = 1
    num_seg_classes: int = 2
    num_cls_classes: int = 2
    input_size: int = 32
    upsample: str = "nearest"
    # fixed input standardization (x - input_mean) / input_std
    input_mean: float = 0.5
    input_std: float = 0.25

    def validate(self) -> list[str]:
        errors = []
        if self.depth < 1:
            errors.append("arch.depth must be >= 1")
        if self.base_channels < 1:
            errors.append("arch.base_channels must be >= 1")
        if self.input_channels < 1:
            errors.append("arch.input_channels must be >= 1")
        if self.num_seg_classes != 2:
            errors.append("arch.num_seg_classes must be 2 (background, foreground)")
        if self.num_cls_classes < 1:
            errors.append("arch.num_cls_classes must be >= 1")
        if self.depth >= 1 and self.input_size % (2 ** self.depth):
            errors.append(f"arch.input_size {self.input_size} not divisible by 2^depth = {2 ** self.depth}")
        if not self.input_std > 0:
            errors.append("arch.input_std must be > 0")
        if self.upsample != "nearest":
            # transposed convolution is a reserved switch value
            errors.append(f"arch.upsample {self.upsample!r} unsupported (only 'nearest')")
        return errors

    def check(self) -> None:
        errors = self.validate()
        if errors:
            raise ConfigError("; ".join(errors))


@dataclass
class LayerSpec:
    name: str
    kind: str  # conv3x3 | conv1x1 | linear
    weight_shape: tuple[int, ...]


@dataclass
class Model:
    """Layer descriptors plus named parameter slots.

    ``active_mask`` is set while a prune mask is applied (see ``pruning``);
    ``head`` names the output layer (never structurally pruned).
    """

    config: ArchConfig
    kind: str  # segmentation | classification
    layers: list[LayerSpec]
    params: dict[str, Tensor]
    active_mask: object | None = None
    shadow: dict[str, np.ndarray] | None = None
    activations: dict[str, Tensor] = field(default_factory=dict)

    @property
    def head(self) -> str:
        return self.layers[-1].name

    @property
    def depth(self) -> int:
        return self.config.depth

    @property
    def base_channels(self) -> int:
        return self.config.base_channels

    def prunable(self) -> list[str]:
        """Weight slots eligible for pruning, in layer order. Biases are exempt."""
        return [f"{layer.name}.weight" for layer in self.layers]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=T.DTYPE)
            if arr.shape != p.data.shape:
                raise ConfigError(f"shape mismatch for {k}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "Model":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in self.params.items()}
        return Model(self.config, self.kind, list(self.layers), params)

    def __call__(self, x, capture: bool = False) -> Tensor:
        return forward(self, x, capture=capture)


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], gain: float = np.sqrt(2.0)) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _encoder_layers(cfg: ArchConfig) -> list[LayerSpec]:
    layers = []
    cin = cfg.input_channels
    for i in range(cfg.depth):
        c = cfg.base_channels * 2 ** i
        layers.append(LayerSpec(f"enc{i}.conv1", "conv3x3", (c, cin, 3, 3)))
        layers.append(LayerSpec(f"enc{i}.conv2", "conv3x3", (c, c, 3, 3)))
        cin = c
    c = cfg.base_channels * 2 ** cfg.depth
    layers.append(LayerSpec("mid.conv1", "conv3x3", (c, cin, 3, 3)))
    layers.append(LayerSpec("mid.conv2", "conv3x3", (c, c, 3, 3)))
    return layers


def _init_params(layers: list[LayerSpec], seed: int) -> dict[str, Tensor]:
    rng = np.random.Generator(np.random.Philox(seed))
    params = {}
    for layer in layers:
        # small output layer keeps the initial softmax near uniform
        gain = 0.1 if layer is layers[-1] else np.sqrt(2.0)
        w = _kaiming_uniform(rng, layer.weight_shape, gain)
        params[f"{layer.name}.weight"] = Tensor(w, requires_grad=True, name=f"{layer.name}.weight")
        params[f"{layer.name}.bias"] = Tensor(np.zeros(layer.weight_shape[0]), requires_grad=True,
                                              name=f"{layer.name}.bias")
    return params


def build_unet(config: ArchConfig, seed: int = 0) -> Model:
    config.check()
    layers = _encoder_layers(config)
    for i in reversed(range(config.depth)):
        c = config.base_channels * 2 ** i
        up = config.base_channels * 2 ** (i + 1)
        layers.append(LayerSpec(f"dec{i}.conv1", "conv3x3", (c, up + c, 3, 3)))
        layers.append(LayerSpec(f"dec{i}.conv2", "conv3x3", (c, c, 3, 3)))
    layers.append(LayerSpec("head", "conv1x1", (config.num_seg_classes, config.base_channels, 1, 1)))
    return Model(config, "segmentation", layers, _init_params(layers, seed))


def build_classifier(config: ArchConfig, seed: int = 0) -> Model:
    """Encoder + bottleneck, global average pool, linear head.

    The bottleneck's second conv (after relu) is the saliency target layer,
    captured as ``activations["L"]``.
    """
    config.check()
    layers = _encoder_layers(config)
    c = config.base_channels * 2 ** config.depth
    layers.append(LayerSpec("fc", "linear", (config.num_cls_classes, c)))
    return Model(config, "classification", layers, _init_params(layers, seed))


def _conv_block(model: Model, x: Tensor, prefix: str) -> Tensor:
    p = model.params
    x = T.relu(T.conv2d(x, p[f"{prefix}.conv1.weight"], p[f"{prefix}.conv1.bias"], padding=1))
    return T.relu(T.conv2d(x, p[f"{prefix}.conv2.weight"], p[f"{prefix}.conv2.bias"], padding=1))


def forward(model: Model, x, capture: bool = False) -> Tensor:
    """Logits for an N,C,H,W batch.

    With ``capture`` the saliency layer output is stored in
    ``model.activations["L"]`` with its gradient retained.
    """
    x = T.as_tensor(x)
    cfg = model.config
    if x.data.ndim != 4 or x.shape[1] != cfg.input_channels:
        raise T.DimensionError(f"expected N x {cfg.input_channels} x H x W batch, got {x.shape}")
    h, w = x.shape[2:]
    if h % 2 ** cfg.depth or w % 2 ** cfg.depth:
        raise T.DimensionError(f"spatial size {(h, w)} not divisible by 2^{cfg.depth}")

    x = T.Tensor((x.data - cfg.input_mean) / cfg.input_std)
    skips = []
    for i in range(cfg.depth):
        x = _conv_block(model, x, f"enc{i}")
        skips.append(x)
        x = T.maxpool2d(x, 2)
    x = _conv_block(model, x, "mid")
    p = model.params

    if model.kind == "classification":
        if capture:
            model.activations["L"] = x.retain_grad()
        return T.linear(T.global_avg_pool(x), p["fc.weight"], p["fc.bias"])

    for i in reversed(range(cfg.depth)):
        x = T.concat_channels(T.upsample_nearest(x, 2), skips[i])
        x = _conv_block(model, x, f"dec{i}")
    return T.conv2d(x, p["head.weight"], p["head.bias"])


def predict_masks(model: Model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Argmax foreground masks (uint8, N,H,W) without recording gradients."""
    if model.kind != "segmentation":
        raise UsageError("mask prediction needs a segmentation model")
    out = []
    with T.no_grad():
        for s in range(0, len(images), batch_size):
            logits = forward(model, images[s:s + batch_size]).data
            out.append((logits[:, 1] > logits[:, 0]).astype(np.uint8))
    if not out:
        return np.zeros((0,) + images.shape[2:], dtype=np.uint8)
    return np.concatenate(out)


def arch_dict(cfg: ArchConfig) -> dict:
    return asdict(cfg)
