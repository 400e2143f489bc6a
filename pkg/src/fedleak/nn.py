"""Layered models with exposed per-layer representations.

A model is a flat list of layer descriptors. Every fully connected layer
computes ``b = W r`` (bias-free unless asked for), and the forward pass can
return the input ``r`` and output ``b`` of every layer so the leakage and
defense code can look inside.

One FC layer is marked as the *defended* layer ``g``; the layers before it
form the feature extractor ``f`` and the layers after it form the head ``h``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Union

import torch
import torch.nn.functional as F

from . import autodiff as ad
from .autodiff import DTYPE, ShapeError

Params = dict[str, torch.Tensor]


@dataclass(frozen=True)
class Conv:
    in_ch: int
    out_ch: int
    k: int = 5
    padding: int = 0


@dataclass(frozen=True)
class MaxPool:
    k: int = 2


@dataclass(frozen=True)
class FC:
    in_features: int
    out_features: int
    bias: bool = False


@dataclass(frozen=True)
class Activation:
    kind: str = "relu"

    def __post_init__(self):
        if self.kind not in ("relu", "sigmoid"):
            raise ValueError(f"unknown activation {self.kind!r}")


@dataclass(frozen=True)
class Flatten:
    pass


LayerSpec = Union[Conv, MaxPool, FC, Activation, Flatten]


@dataclass(frozen=True)
class ModelSpec:
    name: str
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]
    defended_index: int
    num_classes: int

    def __post_init__(self):
        if not (0 <= self.defended_index < len(self.layers)) or not isinstance(
            self.layers[self.defended_index], FC
        ):
            raise ValueError("defended_index must point at an FC layer")
        shapes = layer_shapes(self)
        if shapes[-1] != (self.num_classes,):
            raise ShapeError(f"model output {shapes[-1]} != ({self.num_classes},)")

    @property
    def fc_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, FC)]

    @property
    def conv_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, Conv)]

    @property
    def defended_width(self) -> int:
        return self.layers[self.defended_index].in_features


def layer_shapes(spec: ModelSpec) -> list[tuple[int, ...]]:
    """Per-sample shape after each layer; entry 0 is the input shape."""
    shape = tuple(spec.input_shape)
    shapes = [shape]
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            if len(shape) != 3 or shape[0] != layer.in_ch:
                raise ShapeError(f"layer {i}: conv expects {layer.in_ch} channels, got {shape}")
            h = shape[1] + 2 * layer.padding - layer.k + 1
            w = shape[2] + 2 * layer.padding - layer.k + 1
            if h < 1 or w < 1:
                raise ShapeError(f"layer {i}: kernel {layer.k} too large for {shape}")
            shape = (layer.out_ch, h, w)
        elif isinstance(layer, MaxPool):
            if len(shape) != 3 or shape[1] < layer.k or shape[2] < layer.k:
                raise ShapeError(f"layer {i}: maxpool {layer.k} does not fit {shape}")
            shape = (shape[0], shape[1] // layer.k, shape[2] // layer.k)
        elif isinstance(layer, Flatten):
            shape = (math.prod(shape),)
        elif isinstance(layer, FC):
            if shape != (layer.in_features,):
                raise ShapeError(f"layer {i}: FC expects ({layer.in_features},), got {shape}")
            shape = (layer.out_features,)
        shapes.append(shape)
    return shapes


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------


def _conv_out(size: int, k: int, padding: int = 0) -> int:
    return size + 2 * padding - k + 1


def dlg_lenet(input_shape=(3, 32, 32), num_classes=10, activation="sigmoid") -> ModelSpec:
    c, h, w = input_shape
    layers: list[LayerSpec] = []
    chans = [c, 12, 12, 12, 12]
    for a, b in zip(chans, chans[1:]):
        layers += [Conv(a, b, 5), Activation(activation)]
        h, w = _conv_out(h, 5), _conv_out(w, 5)
    layers += [Flatten(), FC(12 * h * w, num_classes)]
    return ModelSpec("dlg-lenet", tuple(input_shape), tuple(layers), len(layers) - 1, num_classes)


def gs_convnet(input_shape=(3, 32, 32), num_classes=10, activation="relu") -> ModelSpec:
    # "same" padding: with valid 5x5 convs the second pooling stage has no room
    c, h, w = input_shape
    plan = [(c, 32), (32, 64), (64, 64), (64, 128), (128, 128), (128, 128), "pool",
            (128, 128), (128, 128), (128, 128), "pool"]
    layers: list[LayerSpec] = []
    for item in plan:
        if item == "pool":
            layers.append(MaxPool(3))
            h, w = h // 3, w // 3
        else:
            layers += [Conv(item[0], item[1], 5, padding=2), Activation(activation)]
    layers += [Flatten(), FC(128 * h * w, num_classes)]
    return ModelSpec("gs-convnet", tuple(input_shape), tuple(layers), len(layers) - 1, num_classes)


def rep_cnn(input_shape=(3, 32, 32), num_classes=10, activation="relu") -> ModelSpec:
    c, h, w = input_shape
    h, w = _conv_out(h, 5) // 2, _conv_out(w, 5) // 2
    h, w = _conv_out(h, 5) // 2, _conv_out(w, 5) // 2
    layers = (
        Conv(c, 6, 5), Activation(activation), MaxPool(2),
        Conv(6, 16, 5), Activation(activation), MaxPool(2),
        Flatten(),
        FC(16 * h * w, 120), Activation(activation),
        FC(120, 84), Activation(activation),
        FC(84, num_classes),
    )
    return ModelSpec("rep-cnn", tuple(input_shape), layers, 7, num_classes)


def tiny_convfc(input_shape=(3, 32, 32), num_classes=10, activation="relu") -> ModelSpec:
    c, h, w = input_shape
    layers = (
        Conv(c, 12, 5), Activation(activation), Flatten(),
        FC(12 * _conv_out(h, 5) * _conv_out(w, 5), num_classes),
    )
    return ModelSpec("tiny-convfc", tuple(input_shape), layers, 3, num_classes)


def logreg(input_shape=(1, 28, 28), num_classes=10, activation=None) -> ModelSpec:
    layers = (Flatten(), FC(math.prod(input_shape), num_classes))
    return ModelSpec("logreg", tuple(input_shape), layers, 1, num_classes)


REGISTRY: dict[str, Callable[..., ModelSpec]] = {
    "dlg-lenet": dlg_lenet,
    "gs-convnet": gs_convnet,
    "rep-cnn": rep_cnn,
    "tiny-convfc": tiny_convfc,
    "logreg": logreg,
}


def build_model(name: str, input_shape=None, num_classes: int = 10, activation: str | None = None) -> ModelSpec:
    try:
        factory = REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(REGISTRY)}") from None
    kwargs = {"num_classes": num_classes}
    if input_shape is not None:
        kwargs["input_shape"] = tuple(input_shape)
    if activation is not None:
        kwargs["activation"] = activation
    return factory(**kwargs)


# ---------------------------------------------------------------------------
# parameters and forward passes
# ---------------------------------------------------------------------------


def init_params(spec: ModelSpec, seed: int, dtype: torch.dtype = DTYPE) -> Params:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, deterministic per seed."""
    gen = torch.Generator().manual_seed(seed)
    params: Params = {}
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            shape = (layer.out_ch, layer.in_ch, layer.k, layer.k)
            fan_in = layer.in_ch * layer.k * layer.k
        elif isinstance(layer, FC):
            shape = (layer.out_features, layer.in_features)
            fan_in = layer.in_features
        else:
            continue
        bound = 1.0 / math.sqrt(fan_in)
        params[f"{i}.weight"] = (torch.rand(shape, generator=gen, dtype=DTYPE) * 2 - 1).mul_(bound).to(dtype)
        if isinstance(layer, FC) and layer.bias:
            params[f"{i}.bias"] = (torch.rand(shape[0], generator=gen, dtype=DTYPE) * 2 - 1).mul_(bound).to(dtype)
    return params


@dataclass
class ActivationTrace:
    """Input ``r`` and output ``b`` of every layer for one batched forward pass."""

    inputs: list[torch.Tensor] = field(default_factory=list)
    outputs: list[torch.Tensor] = field(default_factory=list)


def apply_layer(layer: LayerSpec, params: Params, i: int, x: torch.Tensor) -> torch.Tensor:
    if isinstance(layer, Conv):
        return ad.conv2d(x, params[f"{i}.weight"], layer.padding)
    if isinstance(layer, MaxPool):
        return ad.maxpool2d(x, layer.k)
    if isinstance(layer, Activation):
        return ad.relu(x) if layer.kind == "relu" else ad.sigmoid(x)
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1)
    return ad.linear(x, params[f"{i}.weight"], params.get(f"{i}.bias"))


def _check_input(spec: ModelSpec, x: torch.Tensor) -> None:
    if tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise ShapeError(f"{spec.name}: input {tuple(x.shape)} does not match (N, {spec.input_shape})")


def run_layers(spec: ModelSpec, params: Params, x: torch.Tensor, start: int = 0, stop: int | None = None):
    stop = len(spec.layers) if stop is None else stop
    for i in range(start, stop):
        x = apply_layer(spec.layers[i], params, i, x)
    return x


def forward(spec: ModelSpec, params: Params, x: torch.Tensor) -> torch.Tensor:
    _check_input(spec, x)
    return run_layers(spec, params, x)


def forward_with_activations(spec: ModelSpec, params: Params, x: torch.Tensor):
    """Logits plus every layer's input and output, for a batch ``x``."""
    _check_input(spec, x)
    trace = ActivationTrace()
    for i, layer in enumerate(spec.layers):
        trace.inputs.append(x)
        x = apply_layer(layer, params, i, x)
        trace.outputs.append(x)
    return x, trace


def features(spec: ModelSpec, params: Params, x: torch.Tensor) -> torch.Tensor:
    """The feature extractor ``f``: representation fed to the defended layer."""
    _check_input(spec, x)
    return run_layers(spec, params, x, 0, spec.defended_index)


def feature_map(spec: ModelSpec, params: Params, layer: int | None = None) -> Callable[[torch.Tensor], torch.Tensor]:
    """Closure ``x -> r`` giving the input of FC layer ``layer`` (default: defended)."""
    stop = spec.defended_index if layer is None else layer
    return lambda x: run_layers(spec, params, x, 0, stop)


# ---------------------------------------------------------------------------
# loss and gradients
# ---------------------------------------------------------------------------


def softmax_cross_entropy(logits: torch.Tensor, labels, reduction: str = "mean") -> torch.Tensor:
    """``-log softmax(logits)[label]``; batched over the leading dimension.

    ``labels`` may be integer class indices or a (N, C) soft-label matrix.
    """
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    labels = torch.as_tensor(labels)
    log_probs = torch.log_softmax(logits, dim=-1)
    if labels.is_floating_point():
        per_sample = -(labels * log_probs).sum(-1)
    else:
        labels = labels.reshape(-1).long()
        if labels.numel() != logits.shape[0]:
            raise ShapeError("one label per logit row required")
        if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
            raise ValueError(f"label out of range for {logits.shape[-1]} classes")
        per_sample = -log_probs.gather(1, labels[:, None]).squeeze(1)
    if reduction == "mean":
        return per_sample.mean()
    if reduction == "sum":
        return per_sample.sum()
    return per_sample


def loss_fn(spec: ModelSpec, params: Params, x: torch.Tensor, y, reduction: str = "mean") -> torch.Tensor:
    return softmax_cross_entropy(forward(spec, params, x), y, reduction)


def batch_gradient(
    spec: ModelSpec, params: Params, x: torch.Tensor, y, create_graph: bool = False
) -> dict[str, torch.Tensor]:
    """Gradient of the batch-mean loss for every parameter tensor."""
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    names = list(params)
    leaves = [params[n] if params[n].requires_grad else params[n].detach().requires_grad_() for n in names]
    local = dict(zip(names, leaves))
    loss = loss_fn(spec, local, x, y)
    grads = ad.gradient(loss, leaves, create_graph=create_graph, allow_unused=True)
    if not create_graph:
        grads = [g.detach() for g in grads]
    return dict(zip(names, grads))


def output_gradients(spec: ModelSpec, params: Params, x: torch.Tensor, y, layer: int):
    """Per-sample ``dl^i/db^i`` and ``r^i`` at FC layer ``layer``.

    Returns ``(delta, r)`` with shapes (N, out) and (N, in) where ``delta``
    is the gradient of each sample's own loss (not divided by N).
    """
    p = {k: v.detach() for k, v in params.items()}
    with torch.no_grad():
        r = run_layers(spec, p, x, 0, layer)
        b = apply_layer(spec.layers[layer], p, layer, r)
    b = b.detach().requires_grad_(True)
    logits = run_layers(spec, p, b, layer + 1)
    per = softmax_cross_entropy(logits, y, reduction="none")
    (delta,) = torch.autograd.grad(per.sum(), [b])
    return delta.detach(), r.detach()


def predict(spec: ModelSpec, params: Params, x: torch.Tensor, chunk: int = 512) -> torch.Tensor:
    out = []
    with torch.no_grad():
        for s in range(0, x.shape[0], chunk):
            out.append(forward(spec, params, x[s : s + chunk]).argmax(-1))
    return torch.cat(out) if out else torch.zeros(0, dtype=torch.long)


def flatten_params(params: Params) -> torch.Tensor:
    return torch.cat([v.reshape(-1) for v in params.values()])


def unflatten_like(flat: torch.Tensor, like: Params) -> Params:
    out, pos = {}, 0
    for k, v in like.items():
        n = v.numel()
        out[k] = flat[pos : pos + n].reshape(v.shape)
        pos += n
    return out
