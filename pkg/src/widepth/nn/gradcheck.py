"""Central finite-difference gradient checks."""
import numpy as np

from .layers import (Conv2d, ConvTranspose2d, Dense, Flatten, LSTM, ReLU, Reshape, Sigmoid,
                     Transpose, Concat)
from .graph import Sequential
from .rng import Rng

EPS = 1e-5
TOL = 1e-4


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise ``|a - n| / max(|a| + |n|, floor)``, maximum over entries."""
    a = np.asarray(analytic, np.float64)
    n = np.asarray(numeric, np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)))


def numeric_grad(f, x, eps=EPS, indices=None):
    """Central differences of scalar ``f()`` with respect to array ``x`` (perturbed in place)."""
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(len(idx) if indices is not None else flat.size)
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        out[j] = (fp - fm) / (2 * eps)
    return out if indices is not None else out.reshape(x.shape)


def _sample(size, max_entries, rng):
    if size <= max_entries:
        return np.arange(size)
    return np.sort(rng.choice(size, max_entries, replace=False))


def check_tensors(loss_fn, analytic, tensors, max_entries=40, rng=None, eps=EPS):
    """Compare analytic gradients against central differences.

    ``loss_fn()`` recomputes the scalar loss from the current contents of
    ``tensors`` (a dict of float64 arrays perturbed in place); ``analytic``
    holds the matching gradients. Returns ``{name: max relative error}``.
    """
    rng = rng or Rng(1234)
    errs = {}
    for name, t in tensors.items():
        idx = _sample(t.size, max_entries, rng)
        num = numeric_grad(loss_fn, t, eps, idx)
        errs[name] = relative_error(analytic[name].reshape(-1)[idx], num)
    return errs


def check_graph(graph, x, rng=None, max_entries=40):
    """Gradient check of ``sum(w * graph(x))`` for a fixed random ``w``.

    The graph is converted to float64 first. Both the parameters and the
    input are checked. Returns ``{name: max relative error}``.
    """
    rng = rng or Rng(99)
    graph.astype(np.float64)
    x = np.asarray(x, np.float64).copy()
    y, cache = graph.forward(x)
    w = rng.child("w").normal(y.shape)
    graph.zero_grad()
    gx = graph.backward(cache, w)
    analytic = dict(graph.named_grads())
    analytic["input"] = gx
    tensors = dict(graph.named_params())
    tensors["input"] = x

    def loss():
        return float(np.sum(w * graph.forward(x)[0]))

    return check_tensors(loss, analytic, tensors, max_entries=max_entries, rng=rng.child("idx"))


def layer_suite(seed=0):
    """Small float64 graphs covering every layer kind, with matching inputs.

    Inputs avoid the ReLU kink by construction (no entries near zero).
    """
    rng = Rng(seed)
    d = np.float64

    def away_from_zero(shape, r):
        v = r.normal(shape)
        return v + 0.1 * np.sign(v)

    suite = {}
    suite["dense"] = (Sequential([Dense(5, 4, rng.child(1), d)], (5,), "dense"),
                      rng.child("x1").normal((3, 5)))
    suite["conv2d"] = (Sequential([Conv2d(2, 3, rng=rng.child(2), dtype=d)], (7, 6, 2), "conv2d"),
                       rng.child("x2").normal((2, 7, 6, 2)))
    suite["transposed-conv2d"] = (
        Sequential([ConvTranspose2d(3, 2, rng=rng.child(3), dtype=d)], (3, 4, 3), "tconv"),
        rng.child("x3").normal((2, 3, 4, 3)))
    suite["lstm"] = (Sequential([LSTM(4, 5, layers=2, rng=rng.child(4), dtype=d)], (6, 4), "lstm"),
                     rng.child("x4").normal((2, 6, 4)))
    suite["relu"] = (Sequential([ReLU()], (4, 3), "relu"), away_from_zero((2, 4, 3), rng.child("x5")))
    suite["sigmoid"] = (Sequential([Sigmoid()], (6,), "sigmoid"), rng.child("x6").normal((3, 6)) * 2)
    suite["flatten"] = (Sequential([Flatten(), Dense(12, 2, rng.child(7), d)], (2, 3, 2), "flatten"),
                        rng.child("x7").normal((2, 2, 3, 2)))
    suite["reshape"] = (Sequential([Dense(6, 6, rng.child(8), d), Reshape((2, 3))], (6,), "reshape"),
                        rng.child("x8").normal((2, 6)))
    suite["transpose"] = (Sequential([Transpose((1, 0, 2)), Flatten(), Dense(12, 3, rng.child(9), d)],
                                     (2, 3, 2), "transpose"), rng.child("x9").normal((2, 2, 3, 2)))
    return suite


def check_concat(seed=0):
    rng = Rng(seed)
    cat = Concat()
    a = rng.child("a").normal((2, 3))
    b = rng.child("b").normal((2, 4))
    w = rng.child("w").normal((2, 7))
    _, sizes = cat.forward([a, b])
    ga, gb = cat.backward(sizes, w)
    loss = lambda: float(np.sum(w * cat.forward([a, b])[0]))
    return check_tensors(loss, {"a": ga, "b": gb}, {"a": a, "b": b})


def run_layer_suite(seed=0):
    """Max relative error per layer kind (all kinds, including concat)."""
    out = {}
    for kind, (graph, x) in layer_suite(seed).items():
        out[kind] = max(check_graph(graph, x).values())
    out["concat"] = max(check_concat(seed).values())
    return out
