"""Tied-weight convolutional encoder-decoder with three anchor-grid scorer heads."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator, NamedTuple

import numpy as np

from .geometry import AnchorGrid, build_anchor_grid
from .tensor import ConvSpec, Tensor, conv3d, leaky_relu, relu, softmax, take, transposed_conv3d

PAPER_FILTERS = (64, 128, 256, 384, 512, 640)
DESK_FILTERS = (8, 16, 24, 32, 40, 48)
LEAK = 0.1
N_LAYERS = 6
DOWNSAMPLE = 2**N_LAYERS


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "3d"
    channels: int = 16
    timesteps: int = 8
    image_h: int = 768
    image_w: int = 1152
    filter_counts: tuple[int, ...] = PAPER_FILTERS
    capacity_multiplier: float = 1.0
    num_classes: int = 4
    cell: int = 64
    box_activation: str = "linear"
    labeled_frames: tuple[int, ...] = (0, 2, 4, 6)

    def __post_init__(self):
        object.__setattr__(self, "variant", str(self.variant).lower())
        object.__setattr__(self, "filter_counts", tuple(int(f) for f in self.filter_counts))
        object.__setattr__(self, "labeled_frames", tuple(int(f) for f in self.labeled_frames))
        self.validate()

    def validate(self) -> None:
        if self.variant not in ("3d", "2d"):
            raise ValueError(f"variant must be '3d' or '2d', got {self.variant!r}")
        if len(self.filter_counts) != N_LAYERS or min(self.filter_counts) < 1:
            raise ValueError(f"filter_counts must list {N_LAYERS} positive counts, got {self.filter_counts}")
        if self.capacity_multiplier <= 0:
            raise ValueError("capacity_multiplier must be positive")
        if self.channels < 1 or self.timesteps < 1 or self.num_classes < 1:
            raise ValueError("channels, timesteps and num_classes must be positive")
        if self.image_h % DOWNSAMPLE or self.image_w % DOWNSAMPLE or self.image_h < 1 or self.image_w < 1:
            raise ValueError(f"image {self.image_h}x{self.image_w} must be a multiple of {DOWNSAMPLE} on both axes")
        if self.cell != DOWNSAMPLE:
            raise ValueError(f"cell {self.cell} must equal the encoder downsampling {DOWNSAMPLE} so grid and code align")
        if self.box_activation not in ("linear", "relu"):
            raise ValueError(f"box_activation must be 'linear' or 'relu', got {self.box_activation!r}")
        if not self.labeled_frames or any(not 0 <= f < self.timesteps for f in self.labeled_frames):
            raise ValueError(f"labeled_frames {self.labeled_frames} outside [0, {self.timesteps})")
        if self.variant == "3d" and self.labeled_frames != tuple(range(0, self.timesteps, 2)):
            raise ValueError(
                f"3d scorer halves time, so labeled_frames must be the even frames {tuple(range(0, self.timesteps, 2))}"
            )

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(max(1, int(round(f * self.capacity_multiplier))) for f in self.filter_counts)

    @property
    def input_shape(self) -> tuple[int, int, int, int]:
        return (self.channels, self.timesteps, self.image_h, self.image_w)

    @property
    def grid(self) -> AnchorGrid:
        return build_anchor_grid(self.image_h, self.image_w, self.cell)

    def encoder_spec(self, out_channels: int) -> ConvSpec:
        if self.variant == "3d":
            return ConvSpec((3, 5, 5), (1, 2, 2), (1, 2, 2), out_channels)
        return ConvSpec((5, 5), (2, 2), (2, 2), out_channels)

    def scorer_spec(self, out_channels: int) -> ConvSpec:
        if self.variant == "3d":
            return ConvSpec((3, 3, 3), (2, 1, 1), (1, 1, 1), out_channels)
        return ConvSpec((3, 3), (1, 1), (1, 1), out_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filter_counts"] = list(self.filter_counts)
        d["labeled_frames"] = list(self.labeled_frames)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    @classmethod
    def full(cls, variant: str = "3d", capacity_multiplier: float = 1.0) -> "ModelConfig":
        return cls(variant=variant, capacity_multiplier=capacity_multiplier)

    @classmethod
    def desk(cls, variant: str = "3d", **overrides) -> "ModelConfig":
        base = dict(variant=variant, channels=8, image_h=128, image_w=192, filter_counts=DESK_FILTERS)
        base.update(overrides)
        return cls(**base)


HEADS = ("cls", "obj", "box")


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.tensors.items()}


class Heads(NamedTuple):
    class_probs: Tensor
    obj_probs: Tensor
    box_params: Tensor


def _head_channels(config: ModelConfig, name: str) -> int:
    return {"cls": config.num_classes, "obj": 2, "box": 4}[name]


def build_model(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Initialise parameters: uniform in +-sqrt(2/fan_in), zero biases."""
    config.validate()
    rng = np.random.default_rng(seed)
    tensors: OrderedDict[str, Tensor] = OrderedDict()
    cin = config.channels
    widths = config.widths
    for i, cout in enumerate(widths):
        spec = config.encoder_spec(cout)
        shape = (cout, cin) + spec.kernel
        fan_in = cin * math.prod(spec.kernel)
        bound = math.sqrt(2.0 / fan_in)
        tensors[f"enc{i}.w"] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
        tensors[f"enc{i}.b"] = Tensor(np.zeros(cout), requires_grad=True)
        cin = cout
    # decoder layer i maps back to encoder layer i's input channels
    enc_inputs = (config.channels,) + widths[:-1]
    for i in range(N_LAYERS):
        tensors[f"dec{i}.b"] = Tensor(np.zeros(enc_inputs[i]), requires_grad=True)
    code_channels = widths[-1]
    for name in HEADS:
        cout = _head_channels(config, name)
        spec = config.scorer_spec(cout)
        fan_in = code_channels * math.prod(spec.kernel)
        bound = math.sqrt(2.0 / fan_in)
        tensors[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, size=(cout, code_channels) + spec.kernel), requires_grad=True)
        tensors[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True)
    return ModelParams(config, tensors)


def count_parameters(params: ModelParams) -> int:
    """Trainable scalars; the decoder shares encoder filters so they count once."""
    return sum(t.size for t in params.tensors.values())


def _check_input(params: ModelParams, x: Tensor) -> None:
    if tuple(x.shape) != params.config.input_shape:
        raise ValueError(f"input shape {list(x.shape)} does not match model input {list(params.config.input_shape)}")


def encoder_layers(params: ModelParams, x: Tensor) -> Iterator[Tensor]:
    """Yield encoder layer outputs one at a time (lets callers drop early layers)."""
    _check_input(params, x)
    cfg = params.config
    h = x
    for i, cout in enumerate(cfg.widths):
        h = leaky_relu(conv3d(h, params[f"enc{i}.w"], params[f"enc{i}.b"], cfg.encoder_spec(cout)), LEAK)
        yield h


def encoder_forward(params: ModelParams, x: Tensor) -> list[Tensor]:
    """Run the six encoder layers; returns every layer output, the last being the code."""
    return list(encoder_layers(params, x))


def encoder_shapes(config: ModelConfig) -> list[tuple[int, ...]]:
    """Layer output shapes implied by the shape law, without running anything."""
    shapes = []
    c, t, h, w = config.input_shape
    for cout in config.widths:
        spec = config.encoder_spec(cout)
        if spec.ndim == 3:
            t, h, w = spec.output_extent((t, h, w))
        else:
            h, w = spec.output_extent((h, w))
        shapes.append((cout, t, h, w))
    return shapes


def decoder_forward(params: ModelParams, code: Tensor) -> Tensor:
    """Mirror the encoder with transposed convolutions on the shared filters.

    Leaky ReLU follows every layer except the last, which stays linear.
    """
    cfg = params.config
    shapes = [cfg.input_shape] + encoder_shapes(cfg)
    if tuple(code.shape) != shapes[-1]:
        raise ValueError(f"code shape {list(code.shape)} does not match encoder output {list(shapes[-1])}")
    h = code
    for i in reversed(range(N_LAYERS)):
        spec = cfg.encoder_spec(cfg.widths[i])
        h = transposed_conv3d(h, params[f"enc{i}.w"], spec, shapes[i], bias=params[f"dec{i}.b"])
        if i > 0:
            h = leaky_relu(h, LEAK)
    return h


def scorer_forward(params: ModelParams, code: Tensor) -> Heads:
    """Class and objectness distributions plus box t-values at the labeled frames."""
    cfg = params.config
    expected = encoder_shapes(cfg)[-1]
    if tuple(code.shape) != expected:
        raise ValueError(f"code shape {list(code.shape)} does not match encoder output {list(expected)}")
    maps = {}
    for name in HEADS:
        spec = cfg.scorer_spec(_head_channels(cfg, name))
        out = conv3d(code, params[f"{name}.w"], params[f"{name}.b"], spec)
        if cfg.variant == "2d":
            out = take(out, (slice(None), list(cfg.labeled_frames)))
        maps[name] = out
    box = relu(maps["box"]) if cfg.box_activation == "relu" else maps["box"]
    return Heads(softmax(maps["cls"], axis=0), softmax(maps["obj"], axis=0), box)


def forward(params: ModelParams, x: Tensor, reconstruct: bool = True) -> tuple[list[Tensor], Tensor | None, Heads]:
    layers = encoder_forward(params, x)
    recon = decoder_forward(params, layers[-1]) if reconstruct else None
    return layers, recon, scorer_forward(params, layers[-1])


def with_config(params: ModelParams, **changes) -> ModelConfig:
    return replace(params.config, **changes)
