"""Layer kinds with hand-written backward passes.

All spatial layers use NHWC layout: a batch of images is ``(N, H, W, C)``.
Shapes passed to ``out_shape`` exclude the batch axis.
"""
import numpy as np
from numpy.lib.stride_tricks import as_strided

from .rng import Rng


class ShapeError(ValueError):
    pass


def _he_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape).astype(dtype)


def _windows(xp, k, s, ho, wo):
    """Strided view (N, ho, wo, k, k, C) of k x k patches with stride s."""
    n, _, _, c = xp.shape
    sn, sh, sw, sc = xp.strides
    return as_strided(xp, (n, ho, wo, k, k, c), (sn, sh * s, sw * s, sh, sw, sc), writeable=False)


def _scatter_patches(out, patches, k, s, ho, wo):
    # inverse of _windows: accumulate (N, ho, wo, k, k, C) patches into out
    for i in range(k):
        for j in range(k):
            out[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += patches[:, :, :, i, j, :]


def _sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Layer:
    kind = "layer"

    def __init__(self):
        self.params = {}
        self.grads = {}

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x):
        raise NotImplementedError

    def backward(self, cache, gy, param_grads=True, input_grad=True):
        raise NotImplementedError

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def _accum(self, name, g):
        if name in self.grads:
            self.grads[name] += g
        else:
            self.grads[name] = g.copy()

    def astype(self, dtype):
        self.params = {k: v.astype(dtype) for k, v in self.params.items()}
        self.zero_grad()

    def describe(self):
        return self.kind


class Dense(Layer):
    """Affine map ``y = x W^T + b`` with ``W`` of shape (units, in_features)."""

    kind = "dense"

    def __init__(self, in_features, units, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or Rng(0)
        self.in_features, self.units = in_features, units
        self.params["W"] = _he_uniform(rng, (units, in_features), in_features, dtype)
        self.params["b"] = np.zeros(units, dtype)
        self.zero_grad()

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeError(f"dense expects ({self.in_features},), got {tuple(in_shape)}")
        return (self.units,)

    def forward(self, x):
        return x @ self.params["W"].T + self.params["b"], x

    def backward(self, x, gy, param_grads=True, input_grad=True):
        if param_grads:
            self._accum("W", gy.T @ x)
            self._accum("b", gy.sum(0))
        if not input_grad:
            return None
        return gy @ self.params["W"]

    def describe(self):
        return f"dense({self.in_features}->{self.units})"


class Conv2d(Layer):
    """Square-kernel convolution over NHWC input."""

    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel=3, stride=2, padding=1, rng=None,
                 dtype=np.float32):
        super().__init__()
        rng = rng or Rng(0)
        self.cin, self.cout = in_channels, out_channels
        self.k, self.s, self.p = kernel, stride, padding
        fan_in = in_channels * kernel * kernel
        self.params["W"] = _he_uniform(rng, (out_channels, kernel, kernel, in_channels), fan_in, dtype)
        self.params["b"] = np.zeros(out_channels, dtype)
        self.zero_grad()

    def _out_hw(self, h, w):
        return (h + 2 * self.p - self.k) // self.s + 1, (w + 2 * self.p - self.k) // self.s + 1

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[2] != self.cin:
            raise ShapeError(f"conv2d expects (H, W, {self.cin}), got {tuple(in_shape)}")
        ho, wo = self._out_hw(in_shape[0], in_shape[1])
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d input {tuple(in_shape)} too small")
        return (ho, wo, self.cout)

    def forward(self, x):
        n, h, w, _ = x.shape
        ho, wo = self._out_hw(h, w)
        p = self.p
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        cols = _windows(xp, self.k, self.s, ho, wo).reshape(n * ho * wo, -1)
        y = cols @ self.params["W"].reshape(self.cout, -1).T + self.params["b"]
        return y.reshape(n, ho, wo, self.cout), (cols, x.shape, xp.shape)

    def backward(self, cache, gy, param_grads=True, input_grad=True):
        cols, xshape, xpshape = cache
        n, h, w, c = xshape
        _, ho, wo, _ = gy.shape
        g2 = gy.reshape(-1, self.cout)
        wm = self.params["W"].reshape(self.cout, -1)
        if param_grads:
            self._accum("W", (g2.T @ cols).reshape(self.params["W"].shape))
            self._accum("b", g2.sum(0))
        if not input_grad:
            return None
        dcols = (g2 @ wm).reshape(n, ho, wo, self.k, self.k, c)
        dxp = np.zeros(xpshape, gy.dtype)
        _scatter_patches(dxp, dcols, self.k, self.s, ho, wo)
        p = self.p
        return dxp[:, p:p + h, p:p + w, :] if p else dxp

    def describe(self):
        return f"conv2d({self.cin}->{self.cout}, k{self.k} s{self.s} p{self.p})"


class ConvTranspose2d(Layer):
    """Transposed convolution; with k=3, s=2, p=1, output_padding=1 it doubles H and W."""

    kind = "transposed-conv2d"

    def __init__(self, in_channels, out_channels, kernel=3, stride=2, padding=1, output_padding=1,
                 rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or Rng(0)
        self.cin, self.cout = in_channels, out_channels
        self.k, self.s, self.p, self.op = kernel, stride, padding, output_padding
        fan_in = in_channels * kernel * kernel / (stride * stride)
        self.params["W"] = _he_uniform(rng, (in_channels, kernel, kernel, out_channels), fan_in, dtype)
        self.params["b"] = np.zeros(out_channels, dtype)
        self.zero_grad()

    def _out_hw(self, h, w):
        f = lambda n: (n - 1) * self.s - 2 * self.p + self.k + self.op
        return f(h), f(w)

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[2] != self.cin:
            raise ShapeError(f"transposed-conv2d expects (H, W, {self.cin}), got {tuple(in_shape)}")
        ho, wo = self._out_hw(in_shape[0], in_shape[1])
        return (ho, wo, self.cout)

    def forward(self, x):
        n, h, w, _ = x.shape
        ho, wo = self._out_hw(h, w)
        k, s, p = self.k, self.s, self.p
        cols = (x.reshape(-1, self.cin) @ self.params["W"].reshape(self.cin, -1)).reshape(n, h, w, k, k, self.cout)
        full = np.zeros((n, (h - 1) * s + k + self.op, (w - 1) * s + k + self.op, self.cout), x.dtype)
        _scatter_patches(full, cols, k, s, h, w)
        y = full[:, p:p + ho, p:p + wo, :] + self.params["b"]
        return y, (x, full.shape)

    def backward(self, cache, gy, param_grads=True, input_grad=True):
        x, fullshape = cache
        n, h, w, _ = x.shape
        _, ho, wo, _ = gy.shape
        p = self.p
        gfull = np.zeros(fullshape, gy.dtype)
        gfull[:, p:p + ho, p:p + wo, :] = gy
        gcols = _windows(gfull, self.k, self.s, h, w).reshape(n * h * w, -1)
        wm = self.params["W"].reshape(self.cin, -1)
        if param_grads:
            self._accum("W", (x.reshape(-1, self.cin).T @ gcols).reshape(self.params["W"].shape))
            self._accum("b", gy.sum((0, 1, 2)))
        return (gcols @ wm.T).reshape(x.shape)

    def describe(self):
        return f"transposed-conv2d({self.cin}->{self.cout}, k{self.k} s{self.s} p{self.p} op{self.op})"


class LSTM(Layer):
    """Stacked LSTM over ``(N, T, F)``; returns the top layer's last hidden state,
    or the full ``(N, T, H)`` sequence when ``return_sequences`` is set."""

    kind = "lstm"

    def __init__(self, in_features, hidden, layers=2, return_sequences=False, rng=None,
                 dtype=np.float32):
        super().__init__()
        rng = rng or Rng(0)
        self.in_features, self.hidden, self.layers = in_features, hidden, layers
        self.return_sequences = return_sequences
        bound = 1.0 / np.sqrt(hidden)
        for l in range(layers):
            f = in_features if l == 0 else hidden
            self.params[f"Wx{l}"] = rng.uniform(-bound, bound, (f, 4 * hidden)).astype(dtype)
            self.params[f"Wh{l}"] = rng.uniform(-bound, bound, (hidden, 4 * hidden)).astype(dtype)
            b = np.zeros(4 * hidden, dtype)
            b[hidden:2 * hidden] = 1.0  # forget-gate bias
            self.params[f"b{l}"] = b
        self.zero_grad()

    def out_shape(self, in_shape):
        if len(in_shape) != 2 or in_shape[1] != self.in_features:
            raise ShapeError(f"lstm expects (T, {self.in_features}), got {tuple(in_shape)}")
        return (in_shape[0], self.hidden) if self.return_sequences else (self.hidden,)

    def forward(self, x):
        hd = self.hidden
        caches = []
        seq = x
        for l in range(self.layers):
            n, t, f = seq.shape
            wh = self.params[f"Wh{l}"]
            xw = (seq.reshape(-1, f) @ self.params[f"Wx{l}"] + self.params[f"b{l}"]).reshape(n, t, 4 * hd)
            h = np.zeros((n, hd), x.dtype)
            c = np.zeros((n, hd), x.dtype)
            steps = []
            hs = np.empty((n, t, hd), x.dtype)
            for ti in range(t):
                a = xw[:, ti] + h @ wh
                i = _sigmoid(a[:, :hd])
                fg = _sigmoid(a[:, hd:2 * hd])
                g = np.tanh(a[:, 2 * hd:3 * hd])
                o = _sigmoid(a[:, 3 * hd:])
                c_prev, h_prev = c, h
                c = fg * c_prev + i * g
                tc = np.tanh(c)
                h = o * tc
                hs[:, ti] = h
                steps.append((i, fg, g, o, c_prev, tc, h_prev))
            caches.append((seq, steps))
            seq = hs
        out = seq if self.return_sequences else seq[:, -1]
        return out, (caches, seq.shape)

    def backward(self, cache, gy, param_grads=True, input_grad=True):
        caches, top_shape = cache
        hd = self.hidden
        if self.return_sequences:
            dseq = gy
        else:
            dseq = np.zeros(top_shape, gy.dtype)
            dseq[:, -1] = gy
        for l in reversed(range(self.layers)):
            seq, steps = caches[l]
            n, t, f = seq.shape
            wh = self.params[f"Wh{l}"]
            da_all = np.empty((n, t, 4 * hd), gy.dtype)
            dwh = np.zeros_like(wh)
            dh_next = np.zeros((n, hd), gy.dtype)
            dc_next = np.zeros((n, hd), gy.dtype)
            for ti in reversed(range(t)):
                i, fg, g, o, c_prev, tc, h_prev = steps[ti]
                dh = dseq[:, ti] + dh_next
                do = dh * tc
                dc = dh * o * (1.0 - tc * tc) + dc_next
                da = da_all[:, ti]
                da[:, :hd] = dc * g * i * (1.0 - i)
                da[:, hd:2 * hd] = dc * c_prev * fg * (1.0 - fg)
                da[:, 2 * hd:3 * hd] = dc * i * (1.0 - g * g)
                da[:, 3 * hd:] = do * o * (1.0 - o)
                dc_next = dc * fg
                if param_grads:
                    dwh += h_prev.T @ da
                dh_next = da @ wh.T
            da2 = da_all.reshape(-1, 4 * hd)
            if param_grads:
                self._accum(f"Wx{l}", seq.reshape(-1, f).T @ da2)
                self._accum(f"Wh{l}", dwh)
                self._accum(f"b{l}", da2.sum(0))
            dseq = (da2 @ self.params[f"Wx{l}"].T).reshape(n, t, f)
        return dseq

    def describe(self):
        return f"lstm({self.in_features}->{self.hidden} x{self.layers})"


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, mask, gy, param_grads=True, input_grad=True):
        return gy * mask


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x):
        y = _sigmoid(x)
        return y, y

    def backward(self, y, gy, param_grads=True, input_grad=True):
        return gy * y * (1.0 - y)


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, shape, gy, param_grads=True, input_grad=True):
        return gy.reshape(shape)


class Reshape(Layer):
    """Per-sample reshape (the inverse of flatten)."""

    kind = "reshape"

    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(shape)

    def out_shape(self, in_shape):
        if int(np.prod(in_shape)) != int(np.prod(self.shape)):
            raise ShapeError(f"cannot reshape {tuple(in_shape)} to {self.shape}")
        return self.shape

    def forward(self, x):
        return x.reshape((x.shape[0],) + self.shape), x.shape

    def backward(self, shape, gy, param_grads=True, input_grad=True):
        return gy.reshape(shape)

    def describe(self):
        return f"reshape{self.shape}"


class Transpose(Layer):
    """Per-sample axis permutation; ``axes`` index the non-batch axes."""

    kind = "transpose"

    def __init__(self, axes):
        super().__init__()
        self.axes = tuple(axes)
        self._full = (0,) + tuple(a + 1 for a in self.axes)
        self._inv = tuple(np.argsort(self._full))

    def out_shape(self, in_shape):
        if len(in_shape) != len(self.axes):
            raise ShapeError(f"transpose{self.axes} got rank-{len(in_shape)} input")
        return tuple(in_shape[a] for a in self.axes)

    def forward(self, x):
        return np.ascontiguousarray(x.transpose(self._full)), None

    def backward(self, cache, gy, param_grads=True, input_grad=True):
        return np.ascontiguousarray(gy.transpose(self._inv))

    def describe(self):
        return f"transpose{self.axes}"


class Concat(Layer):
    """Concatenate flat per-sample feature vectors along the last axis.

    Unlike the other layers, ``forward`` takes a list of inputs and
    ``backward`` returns a list of gradients.
    """

    kind = "concat"

    def out_shape(self, in_shapes):
        if any(len(s) != 1 for s in in_shapes):
            raise ShapeError("concat expects flat inputs")
        return (sum(s[0] for s in in_shapes),)

    def forward(self, xs):
        return np.concatenate(xs, axis=-1), [x.shape[-1] for x in xs]

    def backward(self, sizes, gy, param_grads=True, input_grad=True):
        return np.split(gy, np.cumsum(sizes)[:-1], axis=-1)
