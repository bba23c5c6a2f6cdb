"""Minimal dense-network kernel.

Feed-forward stacks of fully connected layers on float64 numpy arrays,
with hand-written reverse-mode gradients and an AdamW optimizer. There is
no autograd: modules that need branching architectures (shared backbones,
multi-head losses, feature recombination) chain ``forward_cache`` /
``backward`` calls by hand and accumulate gradients per parameter.

Weights are stored ``[out, in]`` so a batch ``x`` of shape ``[n, in]``
maps to ``act(x @ W.T + b)``.
"""

from __future__ import annotations

import numpy as np

LEAKY_SLOPE = 0.01
ACTIVATIONS = ("leaky_relu", "sigmoid", "identity")

LOSS_KINDS = ("softmax-xent", "binary-2logit-xent", "mse")


class ShapeError(ValueError):
    """Input or parameter dimensions do not line up."""


class NonFiniteError(FloatingPointError):
    """A kernel operation produced NaN or Inf."""


def _activate(name, z):
    if name == "leaky_relu":
        return np.where(z > 0, z, LEAKY_SLOPE * z)
    if name == "sigmoid":
        # clip the exponent to keep exp() finite; sigmoid saturates anyway
        return 1.0 / (1.0 + np.exp(-np.clip(z, -500.0, 500.0)))
    if name == "identity":
        return z
    raise ValueError(f"unknown activation {name!r}")


def _activate_grad(name, z, y):
    # y is activation(z); reused where cheaper than recomputing
    if name == "leaky_relu":
        return np.where(z > 0, 1.0, LEAKY_SLOPE)
    if name == "sigmoid":
        return y * (1.0 - y)
    if name == "identity":
        return np.ones_like(z)
    raise ValueError(f"unknown activation {name!r}")


class DenseStack:
    """A chain of dense layers with per-layer activations.

    Initialization is uniform in +-sqrt(6/(fan_in+fan_out)) with zero
    biases, fully determined by ``seed``: the same seed always yields
    bit-identical parameters.
    """

    def __init__(self, dims, activations, seed):
        dims = [int(d) for d in dims]
        if len(dims) < 2:
            raise ShapeError("a stack needs at least one layer (two dims)")
        if len(activations) != len(dims) - 1:
            raise ShapeError(
                f"{len(dims) - 1} layers but {len(activations)} activations"
            )
        for act in activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        self.dims = dims
        self.activations = list(activations)
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            self.biases.append(np.zeros(fan_out))

    @property
    def in_dim(self):
        return self.dims[0]

    @property
    def out_dim(self):
        return self.dims[-1]

    def _check_input(self, x, layer_idx, w):
        if x.ndim != 2 or x.shape[1] != w.shape[1]:
            raise ShapeError(
                f"layer {layer_idx}: expected input [n, {w.shape[1]}], "
                f"got {x.shape}"
            )

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            self._check_input(x, i, w)
            x = _activate(act, x @ w.T + b)
            if not np.all(np.isfinite(x)):
                raise NonFiniteError(f"non-finite output at layer {i}")
        return x

    def forward_cache(self, x):
        """Forward pass that keeps per-layer (input, pre-activation, output)."""
        x = np.asarray(x, dtype=float)
        cache = []
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            self._check_input(x, i, w)
            z = x @ w.T + b
            y = _activate(act, z)
            if not np.all(np.isfinite(y)):
                raise NonFiniteError(f"non-finite output at layer {i}")
            cache.append((x, z, y))
            x = y
        return x, cache

    def backward(self, cache, dout):
        """Backpropagate ``dout`` (gradient w.r.t. the stack output).

        Returns ``(dx, grads)`` where grads mirrors :meth:`parameters`.
        """
        dout = np.asarray(dout, dtype=float)
        grads = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            x, z, y = cache[i]
            dz = dout * _activate_grad(self.activations[i], z, y)
            grads[2 * i] = dz.T @ x
            grads[2 * i + 1] = dz.sum(axis=0)
            dout = dz @ self.weights[i]
        return dout, grads

    def parameters(self):
        """Flat parameter list [W0, b0, W1, b1, ...]; arrays are live views."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def to_dict(self):
        layers = []
        for w, b, act in zip(self.weights, self.biases, self.activations):
            layers.append(
                {
                    "in": int(w.shape[1]),
                    "out": int(w.shape[0]),
                    "activation": act,
                    "weights": w.ravel().tolist(),
                    "bias": b.tolist(),
                }
            )
        return {"format": "dense-stack/v1", "seed": self.seed, "layers": layers}

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "dense-stack/v1":
            raise ValueError(f"unsupported stack format {d.get('format')!r}")
        dims = [d["layers"][0]["in"]] + [l["out"] for l in d["layers"]]
        obj = cls(dims, [l["activation"] for l in d["layers"]], d.get("seed", 0))
        for i, l in enumerate(d["layers"]):
            obj.weights[i] = np.array(l["weights"], dtype=float).reshape(l["out"], l["in"])
            obj.biases[i] = np.array(l["bias"], dtype=float)
        return obj


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits, labels):
    """Mean cross-entropy of integer ``labels`` under softmax ``logits``.

    Returns ``(loss, dlogits)`` with dlogits the gradient of the mean.
    """
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels, dtype=int)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError("label outside logit range")
    p = softmax(logits)
    nll = -np.log(np.maximum(p[np.arange(n), labels], 1e-300))
    dlogits = p.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return float(nll.mean()), dlogits / n


def binary_2logit_xent(logits, targets):
    """Two-logit cross-entropy for binary targets in {0, 1}."""
    targets = np.asarray(targets)
    if not np.isin(targets, (0, 1)).all():
        raise ValueError("binary targets must be 0 or 1")
    return softmax_xent(logits, targets.astype(int))


def mse(pred, target):
    """Mean squared error over all entries; returns (loss, dpred)."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def loss_and_grads(net, batch, targets, loss_kind):
    """Forward ``batch`` through ``net`` and return (loss, parameter grads).

    Gradients are exact reverse-mode derivatives of the mean loss and
    mirror ``net.parameters()``.
    """
    batch = np.asarray(batch, dtype=float)
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    out, cache = net.forward_cache(batch)
    if loss_kind == "softmax-xent":
        loss, dout = softmax_xent(out, targets)
    elif loss_kind == "binary-2logit-xent":
        loss, dout = binary_2logit_xent(out, targets)
    elif loss_kind == "mse":
        loss, dout = mse(out, targets)
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    _, grads = net.backward(cache, dout)
    return loss, grads


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamW:
    """AdamW with decoupled weight decay and bias-corrected moments.

    Binds to a list of parameter arrays and updates them in place, so the
    owning models see every step.
    """

    def __init__(self, params, lr=0.001, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.01):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads):
        if len(grads) != len(self.params):
            raise ShapeError(
                f"{len(grads)} gradients for {len(self.params)} parameters"
            )
        for p, g in zip(self.params, grads):
            if p.shape != g.shape:
                raise ShapeError(f"gradient {g.shape} for parameter {p.shape}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p -= self.lr * (update + self.weight_decay * p)


# ---------------------------------------------------------------------------
# gradient bookkeeping helpers
# ---------------------------------------------------------------------------

def zeros_like_params(params):
    return [np.zeros_like(p) for p in params]


def accumulate(acc, grads, scale=1.0):
    """acc[i] += scale * grads[i], in place."""
    for a, g in zip(acc, grads):
        a += scale * g
    return acc
