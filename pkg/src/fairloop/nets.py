"""Small fixed-architecture networks with hand-written gradients.

Three architectures are used by the training stack:

* ``tanh64``  -- input -> 64 -> 64 -> 1 with tanh hidden units (policy and
  value networks),
* ``linear``  -- a single affine map (default label predictor),
* ``relu64``  -- input -> 64 -> 64 -> 1 with rectified-linear hidden units
  (the larger predictor variant).

Networks output a raw scalar per row.  Probability heads squash the output
through the logistic function.  Gradients are computed by explicit
backpropagation from a per-row d(loss)/d(output) vector, which is all the
training losses need; no general autodiff is provided.

Parameters live in one flat vector with per-layer views, so the optimizer
update is a single vectorized pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

HIDDEN = 64


class NetError(Exception):
    """Shape mismatch or non-finite numbers in network evaluation."""


def sigmoid(v):
    """Numerically stable logistic function."""
    v = np.asarray(v, dtype=np.float64)
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def _orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float) -> np.ndarray:
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class Net:
    """Parameter block backed by one flat vector; ``weights[i]`` maps layer
    i input to its output, ``biases[i]`` shifts it."""

    __slots__ = ("kind", "theta", "weights", "biases", "_shapes")

    def __init__(self, kind: str, shapes: list[tuple[int, int]], theta: np.ndarray | None = None):
        self.kind = kind
        self._shapes = shapes
        size = sum(r * c + c for r, c in shapes)
        self.theta = np.zeros(size) if theta is None else np.asarray(theta, dtype=np.float64)
        if self.theta.size != size:
            raise NetError(f"flat vector has {self.theta.size} entries, expected {size}")
        self.weights, self.biases = [], []
        ofs = 0
        for r, c in shapes:
            self.weights.append(self.theta[ofs : ofs + r * c].reshape(r, c))
            ofs += r * c
            self.biases.append(self.theta[ofs : ofs + c])
            ofs += c

    @property
    def in_dim(self) -> int:
        return self._shapes[0][0]

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return list(self._shapes)

    def copy(self) -> "Net":
        return Net(self.kind, self._shapes, self.theta.copy())

    def flat(self) -> np.ndarray:
        return self.theta.copy()

    def load_flat(self, vec: np.ndarray) -> None:
        if vec.size != self.theta.size:
            raise NetError(f"flat vector has {vec.size} entries, expected {self.theta.size}")
        self.theta[...] = vec


def net_from_params(kind: str, weights: list[np.ndarray], biases: list[np.ndarray]) -> Net:
    """Assemble a net from explicit per-layer parameters (test helper)."""
    shapes = [tuple(w.shape) for w in weights]
    net = Net(kind, shapes)
    for i, (w, b) in enumerate(zip(weights, biases)):
        net.weights[i][...] = w
        net.biases[i][...] = b
    return net


def init_net(kind: str, in_dim: int, rng: np.random.Generator, head_scale: float = 1.0) -> Net:
    """Build a network. Hidden layers use orthogonal init with gain sqrt(2);
    the output layer is orthogonal scaled by ``head_scale``.  The linear
    architecture starts at zero (uniform 0.5 through a probability head)."""
    if kind == "linear":
        return Net(kind, [(in_dim, 1)])
    if kind in ("tanh64", "relu64"):
        net = Net(kind, [(in_dim, HIDDEN), (HIDDEN, HIDDEN), (HIDDEN, 1)])
        net.weights[0][...] = _orthogonal(rng, in_dim, HIDDEN, np.sqrt(2.0))
        net.weights[1][...] = _orthogonal(rng, HIDDEN, HIDDEN, np.sqrt(2.0))
        net.weights[2][...] = _orthogonal(rng, HIDDEN, 1, head_scale)
        return net
    raise NetError(f"unknown architecture {kind!r}")


def forward(net: Net, x: np.ndarray) -> np.ndarray:
    """Raw outputs for a batch ``x`` of shape (n, in_dim); returns shape (n,)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != net.in_dim:
        raise NetError(f"input dim {x.shape[1]} != net dim {net.in_dim}")
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if i < last:
            h = np.tanh(h) if net.kind == "tanh64" else np.maximum(h, 0.0)
    return h[:, 0]


def prob(net: Net, x: np.ndarray) -> np.ndarray:
    """Logistic squashing of the raw output."""
    return sigmoid(forward(net, x))


def forward_cached(net: Net, x: np.ndarray):
    """Forward pass keeping layer activations for a later backward pass."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    acts = [x]
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if i < last:
            h = np.tanh(h) if net.kind == "tanh64" else np.maximum(h, 0.0)
        acts.append(h)
    return h[:, 0], acts


def backward(net: Net, acts: list[np.ndarray], d_out: np.ndarray) -> np.ndarray:
    """Gradient of sum_j d_out[j] * output_j w.r.t. the flat parameter
    vector.  ``acts`` comes from :func:`forward_cached`.  ReLU kinks take
    the right derivative (zero at exactly 0)."""
    grad = np.empty_like(net.theta)
    n_layers = len(net.weights)
    delta = np.asarray(d_out, dtype=np.float64)[:, None]
    ofs = net.theta.size
    for i in range(n_layers - 1, -1, -1):
        inp = acts[i]
        r, c = net.weights[i].shape
        ofs -= c
        np.sum(delta, axis=0, out=grad[ofs : ofs + c])
        ofs -= r * c
        np.matmul(inp.T, delta, out=grad[ofs : ofs + r * c].reshape(r, c))
        if i > 0:
            delta = delta @ net.weights[i].T
            post = acts[i]
            if net.kind == "tanh64":
                delta = delta * (1.0 - post * post)
            else:
                delta = delta * (post > 0.0)
    return grad


def finite_difference_grad(
    net: Net, loss_fn, h: float = 1e-5, indices: np.ndarray | None = None
) -> np.ndarray:
    """Central finite differences of ``loss_fn(net)`` over the flat parameter
    vector (or the given coordinate subset; other entries are nan).  Test
    oracle only; two loss evaluations per coordinate."""
    theta = net.flat()
    grad = np.full_like(theta, np.nan)
    work = net.copy()
    todo = range(theta.size) if indices is None else indices
    for i in todo:
        v = theta.copy()
        v[i] = theta[i] + h
        work.load_flat(v)
        up = loss_fn(work)
        v[i] = theta[i] - h
        work.load_flat(v)
        dn = loss_fn(work)
        grad[i] = (up - dn) / (2.0 * h)
    return grad


@dataclass
class Adam:
    """Adaptive-moment optimizer with standard defaults."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def step(self, net: Net, grad: np.ndarray, lr: float | None = None) -> None:
        if self.m is None:
            self.m = np.zeros_like(net.theta)
            self.v = np.zeros_like(net.theta)
        if not np.isfinite(grad).all():
            raise NetError("non-finite gradient")
        self.t += 1
        rate = self.lr if lr is None else lr
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * grad * grad
        net.theta -= rate * (self.m / c1) / (np.sqrt(self.v / c2) + self.eps)
