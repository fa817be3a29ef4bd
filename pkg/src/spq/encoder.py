"""Small trainable feature extractor with hand-written backward passes.

Images are NHWC float64 arrays. Layers are plain objects holding their
weights; :class:`Encoder` chains them, validates the shape chain at
construction time and returns an :class:`EncoderTape` from ``forward`` that
``backward`` consumes exactly once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError, UsageError
from .numerics import TRAIN_DTYPE, Rng


def _he_uniform(rng: Rng, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(TRAIN_DTYPE)


class Layer:
    """Base layer: no parameters, shape-preserving."""

    kind = "layer"

    def params(self) -> list[np.ndarray]:
        return []

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def forward(self, x: np.ndarray):
        raise NotImplementedError

    def backward(self, cache, grad: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        raise NotImplementedError

    def spec(self) -> str:
        return self.kind


class Conv3x3(Layer):
    """3x3 convolution, stride 1, zero "same" padding. Weights ``(3, 3, in, out)``."""

    kind = "conv"

    def __init__(self, in_ch: int, out_ch: int, weights=None, bias=None):
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.weights = np.zeros((3, 3, in_ch, out_ch)) if weights is None else np.asarray(weights, TRAIN_DTYPE)
        self.bias = np.zeros(out_ch) if bias is None else np.asarray(bias, TRAIN_DTYPE)

    def init(self, rng: Rng) -> None:
        self.weights = _he_uniform(rng, 9 * self.in_ch, (3, 3, self.in_ch, self.out_ch))
        self.bias = np.zeros(self.out_ch)

    def params(self):
        return [self.weights, self.bias]

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[2] != self.in_ch:
            raise ConfigurationError(f"conv expects (H, W, {self.in_ch}) input, got {in_shape}")
        return (in_shape[0], in_shape[1], self.out_ch)

    @staticmethod
    def _patches(x: np.ndarray) -> np.ndarray:
        B, H, W, C = x.shape
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        cols = np.empty((B, H, W, 3, 3, C), dtype=x.dtype)
        for dy in range(3):
            for dx in range(3):
                cols[:, :, :, dy, dx, :] = xp[:, dy : dy + H, dx : dx + W, :]
        return cols.reshape(B * H * W, 9 * C)

    def forward(self, x):
        B, H, W, _ = x.shape
        cols = self._patches(x)
        out = cols @ self.weights.reshape(-1, self.out_ch) + self.bias
        return out.reshape(B, H, W, self.out_ch), (cols, x.shape)

    def backward(self, cache, grad):
        cols, (B, H, W, C) = cache
        g = grad.reshape(-1, self.out_ch)
        gw = (cols.T @ g).reshape(self.weights.shape)
        gb = g.sum(axis=0)
        gcols = (g @ self.weights.reshape(-1, self.out_ch).T).reshape(B, H, W, 3, 3, C)
        gxp = np.zeros((B, H + 2, W + 2, C))
        for dy in range(3):
            for dx in range(3):
                gxp[:, dy : dy + H, dx : dx + W, :] += gcols[:, :, :, dy, dx, :]
        return gxp[:, 1:-1, 1:-1, :], [gw, gb]

    def spec(self):
        return f"conv:{self.in_ch}:{self.out_ch}"


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, cache, grad):
        return np.where(cache, grad, 0.0), []


class MaxPool2x2(Layer):
    kind = "pool"

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] % 2 or in_shape[1] % 2:
            raise ConfigurationError(f"2x2 max-pool needs even (H, W, C) input, got {in_shape}")
        return (in_shape[0] // 2, in_shape[1] // 2, in_shape[2])

    def forward(self, x):
        B, H, W, C = x.shape
        win = x.reshape(B, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 5, 2, 4).reshape(B, H // 2, W // 2, C, 4)
        arg = np.argmax(win, axis=-1)  # first max wins on ties
        out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        return out, (arg, x.shape)

    def backward(self, cache, grad):
        arg, (B, H, W, C) = cache
        win = np.zeros((B, H // 2, W // 2, C, 4))
        np.put_along_axis(win, arg[..., None], grad[..., None], axis=-1)
        gx = win.reshape(B, H // 2, W // 2, C, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(B, H, W, C)
        return gx, []


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, grad):
        return grad.reshape(cache), []


class Affine(Layer):
    """``y = x @ W + b`` with ``W`` of shape ``(in_dim, out_dim)``."""

    kind = "affine"

    def __init__(self, in_dim: int, out_dim: int, weights=None, bias=None):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weights = np.zeros((in_dim, out_dim)) if weights is None else np.asarray(weights, TRAIN_DTYPE)
        self.bias = np.zeros(out_dim) if bias is None else np.asarray(bias, TRAIN_DTYPE)

    def init(self, rng: Rng) -> None:
        self.weights = _he_uniform(rng, self.in_dim, (self.in_dim, self.out_dim))
        self.bias = np.zeros(self.out_dim)

    def params(self):
        return [self.weights, self.bias]

    def out_shape(self, in_shape):
        if in_shape != (self.in_dim,):
            raise ConfigurationError(f"affine expects ({self.in_dim},) input, got {in_shape}")
        return (self.out_dim,)

    def forward(self, x):
        return x @ self.weights + self.bias, x

    def backward(self, cache, grad):
        return grad @ self.weights.T, [cache.T @ grad, grad.sum(axis=0)]

    def spec(self):
        return f"affine:{self.in_dim}:{self.out_dim}"


@dataclass
class EncoderTape:
    caches: list
    used: bool = field(default=False, repr=False)


class Encoder:
    """Layer stack mapping inputs of ``input_shape`` to D-dim descriptors."""

    passthrough = False

    def __init__(self, layers: list[Layer], input_shape: tuple[int, ...]):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
        if len(shape) != 1:
            raise ConfigurationError(f"encoder must end in a flat descriptor, got shape {shape}")
        self.output_dim = shape[0]

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def set_params(self, arrays: list[np.ndarray]) -> None:
        arrays = list(arrays)
        expected = self.params()
        if len(arrays) != len(expected):
            raise ConfigurationError(f"expected {len(expected)} parameter arrays, got {len(arrays)}")
        it = iter(arrays)
        for layer in self.layers:
            if layer.params():
                w, b = next(it), next(it)
                if w.shape != layer.weights.shape or b.shape != layer.bias.shape:
                    raise ConfigurationError(f"parameter shape mismatch in {layer.spec()}")
                layer.weights = np.asarray(w, TRAIN_DTYPE)
                layer.bias = np.asarray(b, TRAIN_DTYPE)

    def spec(self) -> str:
        dims = "x".join(str(s) for s in self.input_shape)
        return f"stack:{dims}:" + ",".join(layer.spec() for layer in self.layers)

    def forward(self, batch: np.ndarray) -> tuple[np.ndarray, EncoderTape]:
        x = np.asarray(batch, dtype=TRAIN_DTYPE)
        if x.shape[1:] != self.input_shape:
            raise DimensionError(f"batch items must have shape {self.input_shape}, got {x.shape[1:]}")
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, EncoderTape(caches)

    def backward(self, tape: EncoderTape, grad_descriptors: np.ndarray) -> list[np.ndarray]:
        """Gradients for every array in :meth:`params`, same order."""
        if tape.used:
            raise UsageError("encoder tape already consumed by a backward pass")
        tape.used = True
        g = np.asarray(grad_descriptors, dtype=TRAIN_DTYPE)
        if g.shape[1:] != (self.output_dim,):
            raise DimensionError(f"gradient must be (B, {self.output_dim}), got {g.shape}")
        grads: list[list[np.ndarray]] = []
        for layer, cache in zip(reversed(self.layers), reversed(tape.caches)):
            g, pg = layer.backward(cache, g)
            grads.append(pg)
        return [p for pg in reversed(grads) for p in pg]


class Passthrough(Encoder):
    """Identity encoder for precomputed descriptor views (head-only training)."""

    passthrough = True

    def __init__(self, dim: int):
        super().__init__([], (dim,))

    def spec(self) -> str:
        return f"passthrough:{self.output_dim}"


def passthrough(batch: np.ndarray) -> np.ndarray:
    return np.asarray(batch)


def default_encoder(output_dim: int, rng: Rng, image_size: int = 32) -> Encoder:
    """Conv(3->32)-ReLU-Pool, Conv(32->64)-ReLU-Pool, Flatten, Affine(-> D)."""
    side = image_size // 4
    layers: list[Layer] = [
        Conv3x3(3, 32), ReLU(), MaxPool2x2(),
        Conv3x3(32, 64), ReLU(), MaxPool2x2(),
        Flatten(), Affine(side * side * 64, output_dim),
    ]
    enc = Encoder(layers, (image_size, image_size, 3))
    init_params(enc, rng)
    return enc


def init_params(enc: Encoder, rng: Rng) -> None:
    """He-uniform weights, zero biases; one child stream per layer."""
    for i, layer in enumerate(enc.layers):
        if hasattr(layer, "init"):
            layer.init(rng.child(i))


def encoder_from_spec(spec: str) -> Encoder:
    """Rebuild a zero-initialized encoder from :meth:`Encoder.spec` output."""
    kind, _, rest = spec.partition(":")
    if kind == "passthrough":
        return Passthrough(int(rest))
    if kind != "stack":
        raise ConfigurationError(f"unknown encoder spec {spec!r}")
    dims, _, layer_specs = rest.partition(":")
    input_shape = tuple(int(d) for d in dims.split("x"))
    layers: list[Layer] = []
    for item in filter(None, layer_specs.split(",")):
        name, *args = item.split(":")
        if name == "conv":
            layers.append(Conv3x3(int(args[0]), int(args[1])))
        elif name == "affine":
            layers.append(Affine(int(args[0]), int(args[1])))
        elif name == "relu":
            layers.append(ReLU())
        elif name == "pool":
            layers.append(MaxPool2x2())
        elif name == "flatten":
            layers.append(Flatten())
        else:
            raise ConfigurationError(f"unknown layer {item!r}")
    return Encoder(layers, input_shape)
