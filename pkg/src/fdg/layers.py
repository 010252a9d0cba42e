"""Layers with explicit forward/backward passes and per-batch saved graphs.

A layer's ``forward`` writes whatever its ``backward`` needs into a cache dict.
Caches keep references to the parameter arrays used in the forward pass; the
optimizer replaces parameter arrays instead of mutating them, so a backward on an
old batch runs against the graph that produced it.
"""
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ScheduleError, ShapeError
from .packets import ActivationPacket


class Layer:
    kind = "layer"

    def __init__(self):
        self.params = {}

    @property
    def param_count(self):
        return int(sum(p.size for p in self.params.values()))

    def output_shape(self, input_shape):
        return input_shape

    def forward(self, x, cache, labels=None):
        raise NotImplementedError

    def backward(self, grad, cache):
        """Return ``(param_grads, input_grad)``; param_grads keyed like ``params``."""
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.describe()})"

    def describe(self):
        return self.kind


def glorot(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in, n_out, rng=None, dtype=np.float64):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {
            "W": glorot(rng, (n_out, n_in), n_in, n_out, dtype),
            "b": np.zeros(n_out, dtype=dtype),
        }

    def describe(self):
        return f"{self.n_in}->{self.n_out}"

    def output_shape(self, input_shape):
        if tuple(input_shape) != (self.n_in,):
            raise ShapeError(f"dense expects ({self.n_in},), got {tuple(input_shape)}")
        return (self.n_out,)

    def forward(self, x, cache, labels=None):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"dense {self.describe()} got input {x.shape}")
        W, b = self.params["W"], self.params["b"]
        cache["x"], cache["W"] = x, W
        return T.matmul(x, W.T) + b

    def backward(self, grad, cache):
        x, W = cache["x"], cache["W"]
        grads = {"W": T.matmul(grad.T, x), "b": grad.sum(axis=0)}
        return grads, T.matmul(grad, W)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, cache, labels=None):
        cache["x"] = x
        return T.elementwise("relu", x)

    def backward(self, grad, cache):
        return {}, T.elementwise("relu_grad_mask", cache["x"], grad)


def _im2col(xp, H, W):
    # xp: [N, C, H+2, W+2] -> [N*H*W, C*9]
    N, C = xp.shape[:2]
    cols = np.empty((N, C, 3, 3, H, W), dtype=xp.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, i, j] = xp[:, :, i:i + H, j:j + W]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(N * H * W, C * 9)


def _col2im(cols, N, C, H, W):
    c = cols.reshape(N, H, W, C, 3, 3).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((N, C, H + 2, W + 2), dtype=cols.dtype)
    for i in range(3):
        for j in range(3):
            xp[:, :, i:i + H, j:j + W] += c[:, :, i, j]
    return xp[:, :, 1:-1, 1:-1]


class Conv2d3x3(Layer):
    """3x3 convolution, stride 1, zero padding 1 (spatial size preserved)."""

    kind = "conv2d-3x3"

    def __init__(self, c_in, c_out, rng=None, dtype=np.float64):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {
            "W": glorot(rng, (c_out, c_in, 3, 3), c_in * 9, c_out * 9, dtype),
            "b": np.zeros(c_out, dtype=dtype),
        }

    def describe(self):
        return f"{self.c_in}->{self.c_out}"

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[0] != self.c_in:
            raise ShapeError(f"conv expects ({self.c_in}, H, W), got {tuple(input_shape)}")
        return (self.c_out,) + tuple(input_shape[1:])

    def forward(self, x, cache, labels=None):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeError(f"conv {self.describe()} got input {x.shape}")
        N, _, H, W = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        cols = _im2col(xp, H, W)
        Wm = self.params["W"].reshape(self.c_out, -1)
        cache["cols"], cache["Wm"], cache["shape"] = cols, Wm, x.shape
        y = T.matmul(cols, Wm.T) + self.params["b"]
        return np.ascontiguousarray(y.reshape(N, H, W, self.c_out).transpose(0, 3, 1, 2))

    def backward(self, grad, cache):
        N, C, H, W = cache["shape"]
        g = grad.transpose(0, 2, 3, 1).reshape(N * H * W, self.c_out)
        dW = T.matmul(g.T, cache["cols"]).reshape(self.c_out, C, 3, 3)
        dcols = T.matmul(g, cache["Wm"])
        return {"W": dW, "b": g.sum(axis=0)}, _col2im(dcols, N, C, H, W)


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x, cache, labels=None):
        cache["shape"] = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad, cache):
        return {}, grad.reshape(cache["shape"])


class SoftmaxCrossEntropy(Layer):
    """Final layer: logits in, mean cross-entropy (0-d tensor) out."""

    kind = "softmax-ce"

    @staticmethod
    def probabilities(logits):
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def forward(self, x, cache, labels=None):
        if labels is None:
            raise ShapeError("softmax-ce head needs labels")
        labels = np.asarray(labels)
        if x.ndim != 2 or labels.shape != (x.shape[0],):
            raise ShapeError(f"head got logits {x.shape} and labels {labels.shape}")
        p = self.probabilities(x)
        n = x.shape[0]
        picked = p[np.arange(n), labels]
        cache["p"], cache["labels"] = p, labels
        return np.asarray(-T.reduce("mean", np.log(picked)), dtype=x.dtype)

    def backward(self, grad, cache):
        p, labels = cache["p"], cache["labels"]
        n = p.shape[0]
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        return {}, d * (np.asarray(grad, dtype=p.dtype) / n)


LAYER_KINDS = {
    "dense": Dense,
    "relu": ReLU,
    "conv": Conv2d3x3,
    "flatten": Flatten,
    "head": SoftmaxCrossEntropy,
}


@dataclass
class SavedGraph:
    batch_id: int
    module_id: int
    caches: list
    forward_step: int = 0


@dataclass
class BackwardResult:
    batch_id: int
    param_grads: list  # one dict per layer, keyed like layer.params
    input_grad: np.ndarray


def module_forward(layers, packet, module_id=0, labels=None, forward_step=0):
    """Run ``packet`` through ``layers``; returns ``(ActivationPacket, SavedGraph)``.

    When the module ends in the head, the returned packet holds the scalar loss.
    """
    x = packet.tensor
    if x.ndim == 0 or x.shape[0] == 0:
        raise ShapeError(f"empty input batch {x.shape}")
    caches = []
    for layer in layers:
        cache = {}
        x = layer.forward(x, cache, labels=labels if layer.kind == "softmax-ce" else None)
        caches.append(cache)
    graph = SavedGraph(packet.batch_id, module_id, caches, forward_step)
    return ActivationPacket(packet.batch_id, x, module_id), graph


def module_backward(layers, incoming, graph, shrink=1.0):
    """Back-propagate ``incoming`` through the module against ``graph``.

    ``shrink`` multiplies the incoming gradient once, at module entry.
    """
    if incoming.batch_id != graph.batch_id:
        raise ScheduleError(
            f"gradient for batch {incoming.batch_id} met graph of batch {graph.batch_id}"
        )
    if not 0.0 < shrink <= 1.0:
        raise ValueError(f"shrink factor must lie in (0, 1], got {shrink}")
    g = incoming.tensor
    if shrink != 1.0:
        g = g * g.dtype.type(shrink)
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        grads[i], g = layers[i].backward(g, graph.caches[i])
    return BackwardResult(graph.batch_id, grads, g)


class Network:
    """An ordered layer stack with a monolithic forward/backward for reference use."""

    def __init__(self, layers, input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            if layer.kind == "softmax-ce":
                if i != len(self.layers) - 1:
                    raise ShapeError("softmax-ce head must be the final layer")
                continue
            shape = layer.output_shape(shape)

    def __len__(self):
        return len(self.layers)

    @property
    def has_head(self):
        return bool(self.layers) and self.layers[-1].kind == "softmax-ce"

    def param_counts(self):
        return [layer.param_count for layer in self.layers]

    def param_arrays(self):
        return [p for layer in self.layers for p in layer.params.values()]

    def get_flat(self):
        arrays = self.param_arrays()
        if not arrays:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in arrays])

    def set_flat(self, flat):
        i = 0
        for layer in self.layers:
            for name, p in layer.params.items():
                layer.params[name] = flat[i:i + p.size].reshape(p.shape).astype(p.dtype)
                i += p.size
        if i != flat.size:
            raise ShapeError(f"flat vector has {flat.size} entries, network has {i}")

    def loss_and_grads(self, x, labels):
        """Plain back-propagation: returns ``(loss, per-layer grad dicts, caches)``."""
        caches = []
        h = x
        for layer in self.layers:
            cache = {}
            h = layer.forward(h, cache, labels=labels if layer.kind == "softmax-ce" else None)
            caches.append(cache)
        g = np.asarray(1.0, dtype=h.dtype)
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            grads[i], g = self.layers[i].backward(g, caches[i])
        return float(h), grads, g

    def logits(self, x):
        h = x
        for layer in self.layers:
            if layer.kind == "softmax-ce":
                break
            h = layer.forward(h, {})
        return h

    def copy(self):
        layers = []
        for layer in self.layers:
            clone = object.__new__(type(layer))
            clone.__dict__.update(layer.__dict__)
            clone.params = {k: v.copy() for k, v in layer.params.items()}
            layers.append(clone)
        return Network(layers, self.input_shape)


def build_network(arch, input_shape, seed=0, dtype="float64"):
    """Build from a spec like ``"dense:32,relu,dense:4,head"``.

    Tokens: ``dense:N``, ``conv:C``, ``relu``, ``flatten``, ``head``. Layer input
    sizes are inferred from ``input_shape`` (features, or ``(C, H, W)``).
    """
    dt = T.DTYPES[dtype]
    rng = np.random.default_rng(seed)
    shape = (input_shape,) if np.isscalar(input_shape) else tuple(input_shape)
    layers = []
    for token in [t.strip() for t in arch.split(",") if t.strip()]:
        name, _, arg = token.partition(":")
        if name == "dense":
            if len(shape) != 1:
                raise ShapeError(f"dense after non-flat shape {shape}; add flatten")
            layer = Dense(shape[0], int(arg), rng, dt)
        elif name == "conv":
            layer = Conv2d3x3(shape[0], int(arg), rng, dt)
        elif name in ("relu", "flatten", "head"):
            layer = LAYER_KINDS[name]()
        else:
            raise ValueError(f"unknown layer token {token!r}")
        if name != "head":
            shape = layer.output_shape(shape)
        layers.append(layer)
    net = Network(layers, (input_shape,) if np.isscalar(input_shape) else input_shape)
    net.arch = arch
    return net


_MANIFEST_MAGIC = b"FDGW"


def save_weights(network, path):
    """Checkpoint: magic, u32 manifest length, manifest text, then tensors in order."""
    manifest = "\n".join(
        f"{i}:{layer.kind}:{','.join(layer.params)}" for i, layer in enumerate(network.layers)
    ).encode()
    with open(path, "wb") as f:
        f.write(_MANIFEST_MAGIC + struct.pack("<I", len(manifest)) + manifest)
        for p in network.param_arrays():
            f.write(T.to_bytes(p))


def load_weights(network, path):
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != _MANIFEST_MAGIC:
        raise ValueError("not a weights checkpoint")
    (n,) = struct.unpack_from("<I", buf, 4)
    manifest = buf[8:8 + n].decode().splitlines()
    if len(manifest) != len(network.layers):
        raise ShapeError("checkpoint layer count does not match network")
    offset = 8 + n
    for line, layer in zip(manifest, network.layers):
        _, kind, names = line.split(":")
        if kind != layer.kind:
            raise ShapeError(f"checkpoint has {kind}, network has {layer.kind}")
        for name in filter(None, names.split(",")):
            arr, offset = T.from_bytes(buf, offset)
            if arr.shape != layer.params[name].shape:
                raise ShapeError(f"{kind}.{name}: {arr.shape} vs {layer.params[name].shape}")
            layer.params[name] = arr
