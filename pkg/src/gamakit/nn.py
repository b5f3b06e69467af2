"""
Minimal feed-forward network engine.

Supports affine, relu, conv2d (valid padding, stride 1), 2x2 max-pooling and
flatten layers, with exact reverse-mode gradients for both inputs and
parameters. Arrays are plain numpy ndarrays; a network carries its storage
dtype (float32 for fast training, float64 for gradient verification).
"""

from __future__ import annotations

import copy

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericError

DTYPES = {"float32": np.float32, "float64": np.float64}


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


class Layer:
    kind = "layer"
    param_names: tuple = ()

    def __init__(self):
        self.params = {}

    def spec(self):
        return {"type": self.kind}

    def output_shape(self, shape):
        return shape

    def init_params(self, rng, dtype):
        pass

    def forward(self, x):
        """Return ``(out, cache)``."""
        raise NotImplementedError

    def backward(self, grad_out, cache):
        """Return ``(grad_in, param_grads)``."""
        raise NotImplementedError


class Affine(Layer):
    kind = "affine"
    param_names = ("W", "b")

    def __init__(self, in_dim, out_dim):
        super().__init__()
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)

    def spec(self):
        return {"type": self.kind, "in": self.in_dim, "out": self.out_dim}

    def output_shape(self, shape):
        if tuple(shape) != (self.in_dim,):
            raise ConfigError(f"affine expects input shape ({self.in_dim},), got {tuple(shape)}")
        return (self.out_dim,)

    def init_params(self, rng, dtype):
        scale = np.sqrt(2.0 / self.in_dim)
        self.params["W"] = (rng.standard_normal((self.in_dim, self.out_dim)) * scale).astype(dtype)
        self.params["b"] = np.zeros(self.out_dim, dtype=dtype)

    def forward(self, x):
        return x @ self.params["W"] + self.params["b"], x

    def backward(self, grad_out, cache):
        x = cache
        grads = {"W": x.T @ grad_out, "b": grad_out.sum(axis=0)}
        return grad_out @ self.params["W"].T, grads


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, grad_out, cache):
        # subgradient at 0 is 0
        return grad_out * cache, {}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad_out, cache):
        return grad_out.reshape(cache), {}


class Conv2d(Layer):
    kind = "conv2d"
    param_names = ("W", "b")

    def __init__(self, in_channels, out_channels, kernel_size):
        super().__init__()
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel_size = int(kernel_size)

    def spec(self):
        return {
            "type": self.kind,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel_size": self.kernel_size,
        }

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.in_channels:
            raise ConfigError(f"conv2d expects ({self.in_channels}, H, W) input, got {tuple(shape)}")
        k = self.kernel_size
        c, h, w = shape
        if h < k or w < k:
            raise ConfigError(f"conv2d kernel {k} larger than input {h}x{w}")
        return (self.out_channels, h - k + 1, w - k + 1)

    def init_params(self, rng, dtype):
        fan_in = self.in_channels * self.kernel_size**2
        shape = (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size)
        self.params["W"] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        self.params["b"] = np.zeros(self.out_channels, dtype=dtype)

    def forward(self, x):
        k = self.kernel_size
        # (M, C, Ho, Wo, k, k)
        cols = sliding_window_view(x, (k, k), axis=(2, 3))
        out = np.einsum("mchwij,ocij->mohw", cols, self.params["W"], optimize=True)
        out += self.params["b"][None, :, None, None]
        return out, x

    def backward(self, grad_out, cache):
        x = cache
        k = self.kernel_size
        W = self.params["W"]
        cols = sliding_window_view(x, (k, k), axis=(2, 3))
        gW = np.einsum("mohw,mchwij->ocij", grad_out, cols, optimize=True)
        gb = grad_out.sum(axis=(0, 2, 3))
        gx = np.zeros_like(x)
        ho, wo = grad_out.shape[2], grad_out.shape[3]
        for i in range(k):
            for j in range(k):
                gx[:, :, i : i + ho, j : j + wo] += np.einsum(
                    "mohw,oc->mchw", grad_out, W[:, :, i, j], optimize=True
                )
        return gx, {"W": gW, "b": gb}


class MaxPool2x2(Layer):
    """2x2 max-pooling with stride 2; odd trailing rows/columns are dropped."""

    kind = "maxpool2x2"

    def output_shape(self, shape):
        if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
            raise ConfigError(f"maxpool2x2 expects (C, H>=2, W>=2) input, got {tuple(shape)}")
        return (shape[0], shape[1] // 2, shape[2] // 2)

    def forward(self, x):
        m, c, h, w = x.shape
        ho, wo = h // 2, w // 2
        blocks = x[:, :, : 2 * ho, : 2 * wo].reshape(m, c, ho, 2, wo, 2)
        blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(m, c, ho, wo, 4)
        # ties go to the first element of the window
        idx = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        return out, (x.shape, idx)

    def backward(self, grad_out, cache):
        shape, idx = cache
        m, c, h, w = shape
        ho, wo = h // 2, w // 2
        blocks = np.zeros((m, c, ho, wo, 4), dtype=grad_out.dtype)
        np.put_along_axis(blocks, idx[..., None], grad_out[..., None], axis=-1)
        blocks = blocks.reshape(m, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        gx = np.zeros(shape, dtype=grad_out.dtype)
        gx[:, :, : 2 * ho, : 2 * wo] = blocks.reshape(m, c, 2 * ho, 2 * wo)
        return gx, {}


LAYER_TYPES = {
    "affine": lambda s: Affine(s["in"], s["out"]),
    "relu": lambda s: ReLU(),
    "flatten": lambda s: Flatten(),
    "conv2d": lambda s: Conv2d(s["in_channels"], s["out_channels"], s["kernel_size"]),
    "maxpool2x2": lambda s: MaxPool2x2(),
}


def layer_from_spec(spec):
    try:
        return LAYER_TYPES[spec["type"]](spec)
    except KeyError as exc:
        raise ConfigError(f"bad layer spec {spec!r}: missing {exc}") from None


class Network:
    """Ordered list of layers mapping inputs of ``input_shape`` to ``num_classes`` logits."""

    def __init__(self, layers, input_shape, num_classes, dtype="float64", seed=0):
        if dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}, got {dtype!r}")
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.num_classes = int(num_classes)
        self.dtype = dtype
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        if shape != (self.num_classes,):
            raise ConfigError(
                f"final layer outputs shape {shape}, expected ({self.num_classes},)"
            )
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            layer.init_params(rng, DTYPES[dtype])

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    def architecture(self):
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [layer.spec() for layer in self.layers],
        }

    @classmethod
    def from_architecture(cls, arch, dtype="float64", seed=0):
        layers = [layer_from_spec(s) for s in arch["layers"]]
        return cls(layers, arch["input_shape"], arch["num_classes"], dtype=dtype, seed=seed)

    def parameters(self):
        """Yield ``(layer_index, name, array)`` for every parameter tensor."""
        for i, layer in enumerate(self.layers):
            for name in layer.param_names:
                yield i, name, layer.params[name]

    def num_parameters(self):
        return sum(p.size for _, _, p in self.parameters())

    def copy(self):
        return copy.deepcopy(self)

    def astype(self, dtype):
        net = self.copy()
        net.dtype = dtype
        for layer in net.layers:
            for name in layer.param_names:
                layer.params[name] = layer.params[name].astype(DTYPES[dtype])
        return net

    def _check_input(self, x):
        x = np.asarray(x)
        if x.ndim == len(self.input_shape):
            x = x[None]
        if tuple(x.shape[1:]) != self.input_shape:
            raise ConfigError(
                f"input batch shape {x.shape} incompatible with network input {self.input_shape}"
            )
        return x.astype(self.np_dtype, copy=False)

    def forward_cached(self, x):
        """Forward pass keeping per-layer caches for :meth:`backward`."""
        h = self._check_input(x)
        caches = []
        for i, layer in enumerate(self.layers):
            h, cache = layer.forward(h)
            if not np.isfinite(h).all():
                raise NumericError(f"non-finite output at layer {i} ({layer.kind})", layer=i)
            caches.append(cache)
        return h, caches

    def backward(self, caches, grad_logits, need_params=True):
        """Backpropagate ``grad_logits``; returns ``(grad_input, grads)``.

        ``grads`` is a list (one dict per layer) of gradient arrays summed over
        the batch, or None when ``need_params`` is false.
        """
        g = grad_logits.astype(self.np_dtype, copy=False)
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            g, pg = self.layers[i].backward(g, caches[i])
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient at layer {i}", layer=i)
            grads[i] = pg
        return g, (grads if need_params else None)

    def logits(self, x):
        return self.forward_cached(x)[0]

    def predict(self, x):
        # argmax ties resolve to the lowest class index
        return self.logits(x).argmax(axis=1)


def forward(net, batch):
    """Return ``(logits, probs)`` for a batch."""
    logits, _ = net.forward_cached(batch)
    return logits, softmax(logits)


def _loss_grad(net, batch, loss_fn, loss_args):
    logits, caches = net.forward_cached(batch)
    probs = softmax(logits)
    values, dlogits = loss_fn(logits, probs, **(loss_args or {}))
    if not np.isfinite(values).all():
        raise NumericError("non-finite loss value", layer=len(net.layers))
    return values, dlogits, caches


def input_gradient(net, batch, loss_fn, loss_args=None, return_values=False):
    """Gradient of each sample's scalar loss w.r.t. its own input coordinates.

    ``loss_fn(logits, probs, **loss_args)`` must return per-sample values and
    the gradient of the summed loss w.r.t. the logits.
    """
    values, dlogits, caches = _loss_grad(net, batch, loss_fn, loss_args)
    gx, _ = net.backward(caches, dlogits, need_params=False)
    return (gx, values) if return_values else gx


def param_gradient(net, batch, loss_fn, loss_args=None, return_values=False):
    """Per-layer parameter gradients of the loss summed over the batch."""
    values, dlogits, caches = _loss_grad(net, batch, loss_fn, loss_args)
    _, grads = net.backward(caches, dlogits)
    return (grads, values) if return_values else grads


def add_grads(a, b):
    return [{k: ga[k] + gb[k] for k in ga} for ga, gb in zip(a, b)]


class SGD:
    """Momentum SGD with classic (coupled) weight decay.

    The update is ``v = momentum * v + (g + weight_decay * theta)`` followed by
    ``theta -= lr * v``.
    """

    def __init__(self, net, lr, momentum=0.0, weight_decay=0.0):
        self.net = net
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [
            {name: np.zeros_like(layer.params[name]) for name in layer.param_names}
            for layer in net.layers
        ]

    def step(self, grads):
        sgd_step(self.net, grads, self.lr, self.momentum, self.weight_decay, self.velocity)


def sgd_step(net, grads, lr, momentum=0.0, weight_decay=0.0, velocity=None):
    """Apply one momentum-SGD update in place and return ``net``.

    ``velocity`` (a list of per-layer dicts) is updated in place when given;
    without it the step is plain SGD with weight decay.
    """
    if len(grads) != len(net.layers):
        raise ConfigError(f"got gradients for {len(grads)} layers, network has {len(net.layers)}")
    for i, layer in enumerate(net.layers):
        for name in layer.param_names:
            p = layer.params[name]
            g = grads[i][name]
            if g.shape != p.shape:
                raise ConfigError(
                    f"gradient shape {g.shape} != parameter shape {p.shape} (layer {i}, {name})"
                )
            d = g + weight_decay * p if weight_decay else g
            if velocity is not None and momentum:
                v = velocity[i][name]
                v *= momentum
                v += d
                d = v
            layer.params[name] = (p - lr * d).astype(p.dtype, copy=False)
    return net


def mlp(input_shape, hidden, num_classes, dtype="float32", seed=0):
    """Flatten followed by affine+relu blocks of the given widths."""
    input_shape = tuple(input_shape)
    dims = [int(np.prod(input_shape)), *hidden, num_classes]
    layers = [Flatten()] if len(input_shape) > 1 else []
    for i in range(len(dims) - 1):
        layers.append(Affine(dims[i], dims[i + 1]))
        if i < len(dims) - 2:
            layers.append(ReLU())
    return Network(layers, input_shape, num_classes, dtype=dtype, seed=seed)


def lenet(input_shape=(1, 14, 14), num_classes=10, width=8, fc=64, dtype="float32", seed=0):
    """Small relative of M-LeNet: two conv+relu stages with pooling, then an FC head."""
    c, h, w = input_shape
    layers = [
        Conv2d(c, width, 3), ReLU(), MaxPool2x2(),
        Conv2d(width, 2 * width, 3), ReLU(), MaxPool2x2(),
        Flatten(),
    ]
    shape = tuple(input_shape)
    for layer in layers:
        shape = layer.output_shape(shape)
    layers += [Affine(shape[0], fc), ReLU(), Affine(fc, num_classes)]
    return Network(layers, input_shape, num_classes, dtype=dtype, seed=seed)


ARCHITECTURES = {"mlp": mlp, "lenet": lenet}


def build(name, input_shape, num_classes, dtype="float32", seed=0, hidden=(256,)):
    if name == "mlp":
        return mlp(input_shape, hidden, num_classes, dtype=dtype, seed=seed)
    if name == "lenet":
        if len(input_shape) == 1:
            raise ConfigError("lenet needs image-shaped (C, H, W) inputs")
        return lenet(input_shape, num_classes, dtype=dtype, seed=seed)
    raise ConfigError(f"unknown architecture {name!r}; valid: {sorted(ARCHITECTURES)}")
