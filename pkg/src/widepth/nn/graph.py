"""Layer sequences with shape inference, activation caches and parameter bookkeeping."""
import hashlib

import numpy as np

from .layers import ShapeError


class StaleCacheError(RuntimeError):
    pass


class Cache:
    """Activations recorded by one ``Sequential.forward`` call."""

    __slots__ = ("graph", "version", "entries", "used")

    def __init__(self, graph, version, entries):
        self.graph = graph
        self.version = version
        self.entries = entries
        self.used = False


class Sequential:
    """A chain of layers with a declared per-sample input shape.

    Shapes are inferred once at construction; ``forward`` rejects inputs that
    do not match the declared shape. A cache may be consumed by exactly one
    ``backward`` call and becomes stale as soon as the parameters change.
    """

    def __init__(self, layers, in_shape, name="seq"):
        self.layers = list(layers)
        self.name = name
        self.in_shape = tuple(in_shape)
        self.frozen = False
        self.version = 0
        self.shapes = [self.in_shape]
        for idx, layer in enumerate(self.layers):
            try:
                self.shapes.append(tuple(layer.out_shape(self.shapes[-1])))
            except ShapeError as e:
                raise ShapeError(f"{name}: layer {idx} ({layer.describe()}): {e}") from None

    @property
    def out_shape(self):
        return self.shapes[-1]

    def forward(self, x):
        if tuple(x.shape[1:]) != self.in_shape:
            raise ShapeError(f"{self.name}: layer 0 ({self.layers[0].describe() if self.layers else 'input'}) "
                             f"expects input {self.in_shape}, got {tuple(x.shape[1:])}")
        entries = []
        for layer in self.layers:
            x, c = layer.forward(x)
            entries.append(c)
        return x, Cache(self, self.version, entries)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, gy, input_grad=True):
        if cache is None or cache.graph is not self:
            raise StaleCacheError(f"{self.name}: cache missing or produced by another graph")
        if cache.used or cache.version != self.version:
            raise StaleCacheError(f"{self.name}: cache is stale (parameters changed or cache reused)")
        cache.used = True
        if gy.shape[1:] != self.out_shape:
            raise ShapeError(f"{self.name}: gradient shape {gy.shape[1:]} != output {self.out_shape}")
        # below the first parametric layer nothing needs a gradient unless the caller asks
        first = next((i for i, l in enumerate(self.layers) if l.params), 0)
        for idx in reversed(range(len(self.layers))):
            need = input_grad or idx > first
            gy = self.layers[idx].backward(cache.entries[idx], gy, param_grads=not self.frozen,
                                           input_grad=need)
            if gy is None:
                return None
        return gy

    # parameter bookkeeping -------------------------------------------------
    def named_params(self, prefix=""):
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params.items():
                out[f"{prefix}{self.name}.{i}.{k}"] = v
        return out

    def named_grads(self, prefix=""):
        out = {}
        for i, layer in enumerate(self.layers):
            for k in layer.params:
                out[f"{prefix}{self.name}.{i}.{k}"] = layer.grads[k]
        return out

    def set_param(self, name, value):
        _, i, k = name.rsplit(".", 2)
        layer = self.layers[int(i)]
        if layer.params[k].shape != value.shape:
            raise ShapeError(f"{name}: shape {value.shape} != {layer.params[k].shape}")
        layer.params[k] = value
        self.touch()

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def touch(self):
        self.version += 1

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        self.touch()
        return self

    def kinds(self):
        return [layer.kind for layer in self.layers]

    def describe(self):
        return " -> ".join(layer.describe() for layer in self.layers)


class Module:
    """Base for models built from several named ``Sequential`` graphs."""

    graphs: dict

    def named_params(self):
        out = {}
        for g in self.graphs.values():
            out.update(g.named_params())
        return out

    def named_grads(self):
        out = {}
        for g in self.graphs.values():
            out.update(g.named_grads())
        return out

    def load_params(self, params):
        mine = self.named_params()
        missing = set(mine) - set(params)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for name, value in params.items():
            if name not in mine:
                raise KeyError(f"unexpected parameter {name}")
            graph = self.graphs[name.rsplit(".", 2)[0]]
            graph.set_param(name, np.asarray(value, dtype=mine[name].dtype).copy())

    def zero_grad(self):
        for g in self.graphs.values():
            g.zero_grad()

    def touch(self):
        for g in self.graphs.values():
            g.touch()

    def astype(self, dtype):
        for g in self.graphs.values():
            g.astype(dtype)
        return self

    def param_hash(self):
        h = hashlib.sha256()
        for name, v in sorted(self.named_params().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def n_params(self):
        return sum(v.size for v in self.named_params().values())
