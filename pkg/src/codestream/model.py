"""The ε-predictor: a 3-layer MLP on (x_t, sinusoidal embedding of t/T).

Layout (row-vector convention, ``h @ W + b``)::

    h0 = [x, emb(t/T)]          (n, 2 + E)
    a1 = act(h0 @ W1 + b1)      (n, H)
    a2 = act(a1 @ W2 + b2)      (n, H)
    ε̂  = a2 @ W3 + b3           (n, 2)

Gradients are derived by hand for this fixed architecture and checked against central finite
differences in the test suite.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import numbers

import numpy as np

from .streams.diffusion import check_step, forward_noising

LAYERS = ('W1', 'b1', 'W2', 'b2', 'W3', 'b3')


def _sigmoid(z):
    return 0.5 * (1 + np.tanh(0.5 * z))

def _silu(z):
    return z * _sigmoid(z)

def _dsilu(z):
    s = _sigmoid(z)
    return s * (1 + z * (1 - s))

def _dtanh(z):
    return 1 - np.tanh(z)**2

# name -> (activation, derivative)
ACTIVATIONS = {
    'silu': (_silu, _dsilu),
    'tanh': (np.tanh, _dtanh),
    'identity': (lambda z: z, np.ones_like),
}


@dataclass(eq=False)
class EpsModel:
    params: dict
    activation: str = 'silu'
    frequency_base: float = 1000.0

    @property
    def hidden_width(self):
        return self.params['W1'].shape[1]

    @property
    def embed_width(self):
        return self.params['W1'].shape[0] - 2

    def parameter_count(self):
        return sum(self.params[name].size for name in LAYERS)

    def expected_shapes(self):
        H, E = self.hidden_width, self.embed_width
        return {'W1': (2 + E, H), 'b1': (H,), 'W2': (H, H), 'b2': (H,), 'W3': (H, 2), 'b3': (2,)}

    def copy(self):
        return EpsModel({name: self.params[name].copy() for name in LAYERS}, self.activation, self.frequency_base)

    def predict(self, x, t, sched):
        return predict_eps(self, x, t, sched)

    def input_grad(self, x, t, cotangent, sched):
        return input_grad(self, x, t, cotangent, sched)


@dataclass(eq=False)
class GradBundle:
    loss: float
    grads: dict = field(default_factory=dict)


def init_model(hidden_width=128, embed_width=32, seed=0, activation='silu', frequency_base=1000.0):
    """Fan-in scaled uniform initialization: every weight and bias of a layer with fan-in k is
    drawn from U(-1/√k, 1/√k), in the order W1, b1, W2, b2, W3, b3."""
    if not isinstance(hidden_width, numbers.Integral) or hidden_width < 1:
        raise ValueError(f"hidden_width must be a positive integer, got {hidden_width!r}")
    if not isinstance(embed_width, numbers.Integral) or embed_width < 2 or embed_width % 2:
        raise ValueError(f"embed_width must be an even integer >= 2, got {embed_width!r}")
    if activation not in ACTIVATIONS:
        raise ValueError(f"Unknown activation {activation!r}; expected one of {sorted(ACTIVATIONS)}")
    rng = np.random.default_rng(seed)
    dims = [(2 + embed_width, hidden_width), (hidden_width, hidden_width), (hidden_width, 2)]
    params = {}
    for i, (fan_in, fan_out) in enumerate(dims, start=1):
        bound = 1 / np.sqrt(fan_in)
        params[f'W{i}'] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f'b{i}'] = rng.uniform(-bound, bound, size=fan_out)
    return EpsModel(params, activation, float(frequency_base))


def time_embedding(t, T, width, base=1000.0):
    "Sinusoidal embedding of t/T: [sin(s·f_k), cos(s·f_k)] with f_k = base^(k / (width/2))."
    s = np.asarray(t, dtype=float) / T
    half = width // 2
    freqs = base ** (np.arange(half) / half)
    angles = s[:, None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def _inputs(model, x, t, sched):
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != 2:
        raise ValueError(f"Expected a batch of 2D points with shape (n, 2), got {x.shape}")
    check_step(t, sched)
    t = np.broadcast_to(np.asarray(t), (len(x),)) if np.ndim(t) == 0 else np.asarray(t)
    if len(t) != len(x):
        raise ValueError(f"Batch length mismatch: {len(x)} points but {len(t)} step indices")
    return np.concatenate([x, time_embedding(t, sched.T, model.embed_width, model.frequency_base)], axis=1)


def _forward(model, h0):
    p = model.params
    act = ACTIVATIONS[model.activation][0]
    z1 = h0 @ p['W1'] + p['b1']
    a1 = act(z1)
    z2 = a1 @ p['W2'] + p['b2']
    a2 = act(z2)
    out = a2 @ p['W3'] + p['b3']
    return out, (h0, z1, a1, z2, a2)


def _backward(model, cache, dout, param_grads=True):
    h0, z1, a1, z2, a2 = cache
    p = model.params
    dact = ACTIVATIONS[model.activation][1]
    grads = {}
    if param_grads:
        grads['W3'] = a2.T @ dout
        grads['b3'] = dout.sum(axis=0)
    dz2 = (dout @ p['W3'].T) * dact(z2)
    if param_grads:
        grads['W2'] = a1.T @ dz2
        grads['b2'] = dz2.sum(axis=0)
    dz1 = (dz2 @ p['W2'].T) * dact(z1)
    if param_grads:
        grads['W1'] = h0.T @ dz1
        grads['b1'] = dz1.sum(axis=0)
    # Only the spatial columns of h0 depend on x; the embedding is constant in x.
    dx = dz1 @ p['W1'][:2].T
    return grads, dx


def predict_eps(model, x, t, sched):
    out, _ = _forward(model, _inputs(model, x, t, sched))
    return out


def input_grad(model, x, t, cotangent, sched):
    "Vector-Jacobian product cotangentᵀ ∂ε_θ(x, t)/∂x; accepts a single point or a batch."
    single = np.ndim(x) == 1
    x = np.atleast_2d(np.asarray(x, dtype=float))
    cotangent = np.atleast_2d(np.asarray(cotangent, dtype=float))
    if cotangent.shape != x.shape:
        raise ValueError(f"Cotangent shape {cotangent.shape} does not match input shape {x.shape}")
    _, cache = _forward(model, _inputs(model, x, t, sched))
    _, dx = _backward(model, cache, cotangent, param_grads=False)
    return dx[0] if single else dx


def _shard_sums(model, x0, eps, t, sched):
    # Unnormalized partial sums: Σ‖ε - ε̂‖² and its parameter gradients.
    out, cache = _forward(model, _inputs(model, forward_noising(x0, t, eps, sched), t, sched))
    diff = out - eps
    grads, _ = _backward(model, cache, 2 * diff)
    return float(np.sum(diff**2)), grads


def _tree_reduce(parts):
    # Fixed pairwise left-to-right reduction, so sharded sums are reproducible.
    while len(parts) > 1:
        merged = []
        for i in range(0, len(parts) - 1, 2):
            (la, ga), (lb, gb) = parts[i], parts[i + 1]
            merged.append((la + lb, {name: ga[name] + gb[name] for name in ga}))
        if len(parts) % 2:
            merged.append(parts[-1])
        parts = merged
    return parts[0]


def loss_and_param_grads(model, x0_batch, eps_batch, t_batch, sched, shards=1):
    """Mean over the batch of ‖ε - ε_θ(√ᾱ_t x_0 + √(1 - ᾱ_t) ε, t)‖² and its exact parameter gradients.

    With ``shards > 1`` the batch is split into contiguous shards evaluated on a thread pool.
    """
    x0 = np.asarray(x0_batch, dtype=float)
    eps = np.asarray(eps_batch, dtype=float)
    t = np.asarray(t_batch)
    n = len(x0)
    if n == 0:
        raise ValueError("Empty batch")
    if not len(eps) == len(t) == n:
        raise ValueError(f"Batch length mismatch: x0 {n}, eps {len(eps)}, t {len(t)}")
    bounds = np.linspace(0, n, min(max(int(shards), 1), n) + 1).astype(int)
    slices = [slice(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]
    shard = lambda s: _shard_sums(model, x0[s], eps[s], t[s], sched)
    if len(slices) == 1:
        parts = [shard(slices[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(slices)) as pool:
            parts = list(pool.map(shard, slices))
    total, grads = _tree_reduce(parts)
    return GradBundle(total / n, {name: grads[name] / n for name in LAYERS})
