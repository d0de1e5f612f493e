"""Local-loss blocks, output layers and the preset architectures.

A block owns one trainable layer plus its scaling layer, activation, optional
max-pool and dropout (the *forward layers*), and a private classifier head
(the *learning layers*) that turns the block output into a local prediction.
Gradients computed inside a block are never handed to the previous block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .itensor import IntTensor, as_int, intdiv, max_abs, sub
from .layers import (
    DEFAULT_ALPHA_INV,
    HEAD_RANGE_SHIFT,
    AvgPool2D,
    Conv2D,
    Dropout,
    Flatten,
    Layer,
    Linear,
    MaxPool2D,
    NitroReLU,
    ScalingLayer,
)
from .optim import IntegerSGDParams, integer_sgd_step


# (kind, size) tokens; sizes are filters for conv and features for linear.
# The last linear layer of every recipe becomes the output layers.
PRESETS: dict[str, dict] = {
    "MLP1": {"input_features": 784, "recipe": [("linear", 100), ("linear", 50), ("linear", 10)]},
    "MLP2": {"input_features": 784,
             "recipe": [("linear", 200), ("linear", 100), ("linear", 50), ("linear", 10)]},
    "MLP3": {"input_features": 784,
             "recipe": [("linear", 1024), ("linear", 1024), ("linear", 1024), ("linear", 10)]},
    "MLP4": {"input_features": 1024,
             "recipe": [("linear", 3000), ("linear", 3000), ("linear", 3000), ("linear", 10)]},
    "VGG8B": {"recipe": [
        ("conv", 128), ("conv", 256), ("pool", 2),
        ("conv", 256), ("conv", 512), ("pool", 2),
        ("conv", 512), ("pool", 2),
        ("conv", 512), ("pool", 2),
        ("flatten", 0), ("linear", 1024), ("linear", 10)]},
    "VGG11B": {"recipe": [
        ("conv", 128), ("conv", 128), ("conv", 128),
        ("conv", 256), ("pool", 2),
        ("conv", 256), ("conv", 512), ("pool", 2),
        ("conv", 512), ("conv", 512), ("pool", 2),
        ("conv", 512), ("pool", 2),
        ("flatten", 0), ("linear", 1024), ("linear", 10)]},
    # desk-scale CNN: two conv blocks and a linear output
    "CNN2": {"recipe": [("conv", 16), ("pool", 2), ("conv", 32), ("pool", 2),
                        ("flatten", 0), ("linear", 10)]},
}


@dataclass(frozen=True)
class ArchHyper:
    alpha_inv: int = DEFAULT_ALPHA_INV
    d_lr: int = 4096
    p_c: int = 0  # dropout percent after conv blocks
    p_l: int = 0  # dropout percent after linear blocks
    head_shift: int = HEAD_RANGE_SHIFT


@dataclass(frozen=True)
class BlockOptim:
    """Optimizer settings one block needs for its local update."""

    lr: IntegerSGDParams
    fw: IntegerSGDParams
    af: int


class UnknownPresetError(ValueError):
    pass


def head_pool_window(channels: int, height: int, width: int, d_lr: int) -> int:
    """Average-pool window for a conv block's learning head.

    Picks the finest pooling whose output ``C*h'*w'`` fits in ``d_lr`` and then
    the largest window giving that same output size.  Falls back to a global
    pool when even one value per channel exceeds ``d_lr``.
    """
    side = max(height, width)
    for k in range(1, side + 1):
        ho, wo = height // k, width // k
        if ho >= 1 and wo >= 1 and channels * ho * wo <= d_lr:
            while (k + 1 <= min(height, width) and height // (k + 1) == ho
                   and width // (k + 1) == wo):
                k += 1
            return k
    return min(height, width)


def build_learning_head(block_output_shape: tuple, d_lr: int, class_count: int,
                        rng: np.random.Generator, shift: int = HEAD_RANGE_SHIFT) -> list[Layer]:
    if d_lr < class_count:
        raise ValueError(f"d_lr={d_lr} is smaller than the class count {class_count}")
    layers: list[Layer] = []
    if len(block_output_shape) == 3:
        c, h, w = block_output_shape
        k = head_pool_window(c, h, w, d_lr)
        if k > 1:
            layers.append(AvgPool2D(k))
            h, w = (h - k) // k + 1, (w - k) // k + 1
        layers.append(Flatten())
        features = c * h * w
    else:
        (features,) = block_output_shape
    linear = Linear(features, class_count, rng)
    layers += [linear, ScalingLayer.after(linear, shift=shift)]
    return layers


def _run(layers, x, training):
    for layer in layers:
        x = layer.forward(x, training)
    return x


class LocalLossBlock:
    def __init__(self, index: int, forward_layers: list[Layer], learning_layers: list[Layer]):
        self.index = index
        self.forward_layers = forward_layers
        self.learning_layers = learning_layers
        self.stats: dict[str, int] = {}
        self._a = None
        self._trainable_pos = next(i for i, layer in enumerate(forward_layers) if layer.params)
        self._head_pos = next(i for i, layer in enumerate(learning_layers) if layer.params)

    @property
    def trainable(self) -> Layer:
        return self.forward_layers[self._trainable_pos]

    @property
    def head(self) -> Linear:
        return self.learning_layers[self._head_pos]

    @property
    def kind(self) -> str:
        return "conv" if isinstance(self.trainable, Conv2D) else "linear"

    def forward(self, a_prev: IntTensor, training: bool = False) -> IntTensor:
        x = as_int(a_prev)
        for i, layer in enumerate(self.forward_layers):
            x = layer.forward(x, training)
            if training and i == self._trainable_pos:
                self.stats["z"] = max_abs(x)
            elif training and i == self._trainable_pos + 1:
                self.stats["z_star"] = max_abs(x)
            elif training and isinstance(layer, NitroReLU):
                self.stats["act"] = max_abs(x)
        if training:
            self._a = x
            # after dropout rescaling, which may step outside the activation range
            self.stats["out"] = max_abs(x)
        return x

    def predict_local(self, a_l: IntTensor, training: bool = False) -> IntTensor:
        return _run(self.learning_layers, a_l, training)

    def backward(self, y_encoded: IntTensor, opt: BlockOptim) -> int:
        """Train this block from its cached forward pass; returns the local loss."""
        if self._a is None:
            raise RuntimeError(f"block {self.index}: backward without a training forward pass")
        y_hat = self.predict_local(self._a, training=True)
        grad = sub(y_hat, y_encoded)
        loss = intdiv(int((grad.astype(object) ** 2).sum()), 2)

        # learning layers: gradient of the local loss w.r.t. the block output
        delta = grad
        for layer in reversed(self.learning_layers):
            delta = layer.backward(delta)
        self.stats["delta_fw"] = max_abs(delta)
        head = self.head
        head.params["weight"] = integer_sgd_step(head.weight, head.grads["weight"], opt.lr)

        delta = intdiv(delta, opt.af)
        for layer in reversed(self.forward_layers[self._trainable_pos + 1:]):
            delta = layer.backward(delta)
        layer = self.trainable
        layer.backward(delta, need_input_grad=False)
        self.stats["grad_w"] = max_abs(layer.grads["weight"])
        layer.params["weight"] = integer_sgd_step(layer.weight, layer.grads["weight"], opt.fw)
        self._a = None
        return loss

    def layers(self):
        return list(self.forward_layers) + list(self.learning_layers)


class Network:
    def __init__(self, name: str, input_shape: tuple, class_count: int, blocks: list[LocalLossBlock],
                 output_layers: list[Layer], hyper: ArchHyper, seed: int = 0):
        self.name = name
        self.input_shape = tuple(input_shape)
        self.class_count = class_count
        self.blocks = blocks
        self.output_layers = output_layers
        self.hyper = hyper
        self.seed = seed
        self.output_stats: dict[str, int] = {}

    @property
    def output(self) -> Linear:
        return next(layer for layer in self.output_layers if layer.params)

    def forward(self, x: IntTensor, training: bool = False) -> IntTensor:
        for block in self.blocks:
            x = block.forward(x, training)
        for layer in self.output_layers:
            x = layer.forward(x, training)
            if training and layer is self.output:
                self.output_stats["z"] = max_abs(x)
        return x

    def update_output(self, grad: IntTensor, params: IntegerSGDParams) -> None:
        delta = grad
        for layer in reversed(self.output_layers):
            if layer is self.output:
                layer.backward(delta, need_input_grad=False)
                break
            delta = layer.backward(delta)
        out = self.output
        out.params["weight"] = integer_sgd_step(out.weight, out.grads["weight"], params)

    def predict(self, x: IntTensor) -> np.ndarray:
        return self.forward(x, training=False).argmax(axis=1)

    def named_parameters(self) -> list[tuple[str, Layer]]:
        """``(name, layer)`` pairs for every trainable layer in a fixed order."""
        out = []
        for block in self.blocks:
            out.append((f"block{block.index}.fw", block.trainable))
            out.append((f"block{block.index}.lr", block.head))
        out.append(("output", self.output))
        return out

    def state_dict(self) -> dict[str, IntTensor]:
        return {f"{name}.weight": layer.weight for name, layer in self.named_parameters()}

    def load_state_dict(self, state: dict[str, IntTensor]) -> None:
        for name, layer in self.named_parameters():
            key = f"{name}.weight"
            if key not in state:
                raise KeyError(f"missing tensor {key}")
            value = as_int(state[key])
            if value.shape != layer.weight.shape:
                raise ValueError(f"{key}: shape {value.shape} != expected {layer.weight.shape}")
            layer.params["weight"] = value.copy()

    def describe(self) -> list[str]:
        lines = [f"{self.name}: input {self.input_shape}, {self.class_count} classes, "
                 f"{len(self.blocks)} blocks"]
        for block in self.blocks:
            fw = " -> ".join(layer.describe() for layer in block.forward_layers)
            lr = " -> ".join(layer.describe() for layer in block.learning_layers)
            lines.append(f"  block {block.index}: {fw}")
            lines.append(f"    learning: {lr}")
        lines.append("  output: " + " -> ".join(layer.describe() for layer in self.output_layers))
        return lines


def _block_rngs(seed: int, count: int) -> list[tuple[np.random.Generator, np.random.Generator]]:
    """Independent (init, dropout) generators per block plus one for the output."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [tuple(np.random.default_rng(s) for s in child.spawn(2)) for child in children]


def build_network(name: str, recipe, input_shape, class_count: int, hyper: ArchHyper,
                  seed: int = 0) -> Network:
    trainable = [i for i, (kind, _) in enumerate(recipe) if kind in ("conv", "linear")]
    if not trainable or recipe[trainable[-1]][0] != "linear":
        raise ValueError("recipe must end with a linear output layer")
    if recipe[trainable[-1]][1] != class_count:
        raise ValueError(f"recipe output width {recipe[trainable[-1]][1]} != class count {class_count}")
    rngs = _block_rngs(seed, len(trainable))

    shape = tuple(input_shape)
    blocks: list[LocalLossBlock] = []
    output_layers: list[Layer] = []
    pending: list[Layer] = []
    current: list[Layer] | None = None

    def close_block():
        nonlocal current, shape
        if current is None:
            return
        idx = len(blocks)
        init_rng = rngs[idx][0]
        head = build_learning_head(shape, hyper.d_lr, class_count, init_rng, hyper.head_shift)
        blocks.append(LocalLossBlock(idx, current, head))
        current = None

    for pos, (kind, size) in enumerate(recipe):
        if kind == "pool":
            if current is None:
                raise ValueError("pool must follow a conv layer")
            pool = MaxPool2D(size, size)
            # keep dropout last inside the block
            current.insert(len(current) - 1, pool)
            shape = pool.output_shape(shape)
            continue
        if kind == "flatten":
            close_block()
            pending.append(Flatten())
            shape = (int(np.prod(shape)),)
            continue
        close_block()
        idx = len(blocks)
        init_rng, drop_rng = rngs[idx]
        if kind == "linear" and len(shape) != 1:
            if not any(isinstance(layer, Flatten) for layer in pending):
                pending.append(Flatten())
            shape = (int(np.prod(shape)),)
        if kind == "conv":
            if len(shape) != 3:
                raise ValueError(f"conv layer needs a [C, H, W] input, got {shape}")
            layer: Layer = Conv2D(shape[0], size, kernel=3, stride=1, padding=1, rng=init_rng)
            rate = hyper.p_c
        elif kind == "linear":
            layer = Linear(shape[0], size, init_rng)
            rate = hyper.p_l
        else:
            raise ValueError(f"unknown recipe token {kind!r}")
        out_shape = layer.output_shape(shape)
        if pos == trainable[-1]:
            output_layers = pending + [layer, ScalingLayer.after(layer, shift=hyper.head_shift)]
            pending = []
            shape = out_shape
            break
        current = pending + [layer, ScalingLayer.after(layer), NitroReLU(hyper.alpha_inv),
                             Dropout(rate, drop_rng)]
        pending = []
        shape = out_shape

    return Network(name, input_shape, class_count, blocks, output_layers, hyper, seed)


def build_preset(name: str, input_shape, class_count: int, hyper: ArchHyper | None = None,
                 seed: int = 0) -> Network:
    if name not in PRESETS:
        raise UnknownPresetError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    hyper = hyper or ArchHyper()
    preset = PRESETS[name]
    want = preset.get("input_features")
    if want is not None and int(np.prod(input_shape)) != want:
        raise ValueError(f"{name} expects {want} input features, got shape {tuple(input_shape)}")
    if want is None and len(input_shape) != 3:
        raise ValueError(f"{name} expects a [C, H, W] input, got {tuple(input_shape)}")
    recipe = [tuple(t) for t in preset["recipe"]]
    recipe[-1] = ("linear", class_count)
    return build_network(name, recipe, input_shape, class_count, hyper, seed)
