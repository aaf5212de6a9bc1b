"""Minimal dense neural-network engine.

Forward evaluation, exact reverse-mode gradients for MSE and Gaussian NLL
losses with L2 weight regularization, inverted dropout, and ADAM.

Weights are stored as ``(n_in, n_out)`` so that a layer is ``x @ W + b``.
Every array may carry extra leading axes; a leading *member* axis of size M
turns a single :class:`DenseNet` into M independent networks that are
evaluated and trained together (used for ensembles).
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "ShapeError",
    "TrainingDivergenceError",
    "DenseNet",
    "AdamState",
    "TrainConfig",
    "init_net",
    "stack_nets",
    "forward",
    "split_gaussian",
    "sample_dropout_masks",
    "loss_and_gradient",
    "adam_init",
    "adam_step",
    "train",
    "flush_tiny",
    "LOGVAR_CLAMP",
]

LOGVAR_CLAMP = 10.0

_ACTIVATIONS = {
    # name: (f(z), f'(z) expressed through a = f(z))
    "tanh": (np.tanh, lambda a: 1.0 - a * a),
    "relu": (lambda z: np.maximum(z, 0.0), lambda a: (a > 0.0).astype(a.dtype)),
    "linear": (lambda z: z, lambda a: np.ones_like(a)),
}
_HEADS = ("point", "gaussian")
_LOSSES = ("mse", "gaussian_nll")


class ShapeError(ValueError):
    """Array dimensions do not line up with the network."""


class TrainingDivergenceError(ArithmeticError):
    """Loss became non-finite during training."""

    def __init__(self, batch_index, epoch=None, loss=float("nan")):
        self.batch_index = batch_index
        self.epoch = epoch
        self.loss = loss
        super().__init__(
            f"non-finite loss {loss!r} at epoch {epoch}, batch {batch_index}")


@dataclass
class DenseNet:
    """Fully connected network.

    ``head="gaussian"`` means the final layer emits a mean half followed by a
    log-variance half.
    """

    weights: list
    biases: list
    activation: str = "tanh"
    head: str = "point"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.head not in _HEADS:
            raise ValueError(f"unknown output head {self.head!r}")
        if not self.weights or len(self.weights) != len(self.biases):
            raise ShapeError("need one bias per weight matrix and at least one layer")
        lead = self.weights[0].shape[:-2]
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape[:-2] != lead or b.shape != W.shape[:-2] + W.shape[-1:]:
                raise ShapeError(f"layer {k}: weight {W.shape} / bias {b.shape} mismatch")
            if k and W.shape[-2] != self.weights[k - 1].shape[-1]:
                raise ShapeError(
                    f"layer {k} expects {W.shape[-2]} inputs, previous layer "
                    f"emits {self.weights[k - 1].shape[-1]}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {k} has non-finite parameters")
        if self.head == "gaussian" and self.weights[-1].shape[-1] % 2:
            raise ShapeError("gaussian head needs an even output width")

    @property
    def sizes(self):
        return [self.weights[0].shape[-2]] + [W.shape[-1] for W in self.weights]

    @property
    def hidden_sizes(self):
        return self.sizes[1:-1]

    @property
    def input_dim(self):
        return self.sizes[0]

    @property
    def output_dim(self):
        """Dimension of the predicted quantity (mean half for gaussian heads)."""
        out = self.sizes[-1]
        return out // 2 if self.head == "gaussian" else out

    @property
    def n_members(self):
        """Size of the leading member axis, or ``None`` for a single net."""
        lead = self.weights[0].shape[:-2]
        return lead[0] if lead else None

    @property
    def dtype(self):
        return self.weights[0].dtype

    @property
    def n_params(self):
        return sum(p.size for p in self.params())

    def params(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def with_params(self, params, validate=True):
        params = list(params)
        if validate:
            return replace(self, weights=params[0::2], biases=params[1::2])
        new = object.__new__(DenseNet)
        new.__dict__.update(self.__dict__, weights=params[0::2], biases=params[1::2])
        return new

    def copy(self):
        return self.with_params([p.copy() for p in self.params()])

    def member(self, i):
        if self.n_members is None:
            raise ValueError("not a stacked network")
        return self.with_params([p[i].copy() for p in self.params()])

    def astype(self, dtype):
        return self.with_params([p.astype(dtype) for p in self.params()])

    def to_dict(self):
        return {
            "activation": self.activation,
            "head": self.head,
            "dtype": np.dtype(self.dtype).name,
            "weights": [{"shape": list(W.shape), "data": W.ravel().tolist()} for W in self.weights],
            "biases": [{"shape": list(b.shape), "data": b.ravel().tolist()} for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d):
        dt = np.dtype(d["dtype"])

        def arr(entry):
            return np.asarray(entry["data"], dtype=np.float64).astype(dt).reshape(entry["shape"])

        return cls(
            weights=[arr(w) for w in d["weights"]],
            biases=[arr(b) for b in d["biases"]],
            activation=d["activation"],
            head=d["head"],
        )


INIT_SCHEMES = ("glorot", "he")


def init_net(sizes, seed=0, activation="tanh", head="point", dtype=np.float64, init="glorot"):
    """Uniform-initialised network with zero biases.

    ``init="glorot"`` draws from +-sqrt(6 / (fan_in + fan_out)); ``"he"`` from
    +-sqrt(6 / fan_in), the variance-preserving choice for ReLU.
    ``sizes`` is ``[n_in, *hidden, n_out]`` where ``n_out`` is the dimension of
    the predicted quantity; a gaussian head doubles the final width.
    """
    if init not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {init!r}")
    sizes = list(sizes)
    if len(sizes) < 2 or min(sizes) < 1:
        raise ShapeError(f"bad layer sizes {sizes}")
    if head == "gaussian":
        sizes[-1] *= 2
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / (n_in + n_out)) if init == "glorot" else np.sqrt(6.0 / n_in)
        weights.append(rng.uniform(-lim, lim, size=(n_in, n_out)).astype(dtype))
        biases.append(np.zeros(n_out, dtype=dtype))
    return DenseNet(weights, biases, activation=activation, head=head)


def stack_nets(nets):
    """Combine same-architecture single nets into one stacked net."""
    nets = list(nets)
    if not nets:
        raise ValueError("no networks to stack")
    first = nets[0]
    for n in nets[1:]:
        if n.sizes != first.sizes or n.activation != first.activation or n.head != first.head:
            raise ShapeError("cannot stack networks with different architectures")
    params = [np.stack(ps) for ps in zip(*(n.params() for n in nets))]
    return first.with_params(params)


def _check_input(net, x):
    x = np.asarray(x)
    if x.ndim == 0 or x.shape[-1] != net.input_dim:
        raise ShapeError(f"input has shape {x.shape}, network expects last dim {net.input_dim}")
    return x.astype(net.dtype, copy=False)


def _check_masks(net, masks):
    if masks is None:
        return None
    masks = list(masks)
    hidden = net.hidden_sizes
    if len(masks) != len(hidden):
        raise ShapeError(f"{len(masks)} dropout masks for {len(hidden)} hidden layers")
    for k, (m, h) in enumerate(zip(masks, hidden)):
        if np.shape(m)[-1] != h:
            raise ShapeError(f"dropout mask {k} has width {np.shape(m)[-1]}, layer has {h}")
    return masks


def _forward_trace(net, x, masks):
    """Return (layer inputs, unmasked hidden activations, output)."""
    f = _ACTIVATIONS[net.activation][0]
    inputs, hidden = [x], []
    a = x
    last = len(net.weights) - 1
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ W
        z += b[..., None, :] if b.ndim > 1 else b
        if k == last:
            return inputs, hidden, z
        h = f(z)
        hidden.append(h)
        a = h * masks[k] if masks is not None else h
        inputs.append(a)


def forward(net, x, dropout_mask=None):
    """Evaluate ``net`` on ``x`` of shape ``(..., n_in)``.

    A stacked net with M members maps ``(N, n_in)`` or ``(M, N, n_in)`` to
    ``(M, N, n_out)``. ``dropout_mask`` is one multiplicative factor array per
    hidden layer, broadcastable against that layer's activations.
    """
    x = _check_input(net, x)
    masks = _check_masks(net, dropout_mask)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    out = _forward_trace(net, x, masks)[2]
    return out[..., 0, :] if squeeze else out


def split_gaussian(out):
    """Split a gaussian-head output into (mean, variance) with a clamped log-variance."""
    d = out.shape[-1] // 2
    return out[..., :d], np.exp(np.clip(out[..., d:], -LOGVAR_CLAMP, LOGVAR_CLAMP))


def sample_dropout_masks(net, batch_shape, keep_prob, rng):
    """Inverted-dropout masks for each hidden layer: entries are 0 or 1/keep_prob."""
    if keep_prob >= 1.0:
        return None
    dt = net.dtype
    return [(rng.random(tuple(batch_shape) + (h,)) < keep_prob).astype(dt) / dt.type(keep_prob)
            for h in net.hidden_sizes]


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    learning_rate: float = 1e-3
    l2_coeff: float = 0.0
    loss: str = "mse"
    dropout_keep_prob: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.l2_coeff < 0:
            raise ValueError("l2_coeff must be >= 0")
        if self.loss not in _LOSSES:
            raise ValueError(f"loss must be one of {_LOSSES}")
        if not 0.0 < self.dropout_keep_prob <= 1.0:
            raise ValueError("dropout_keep_prob must lie in (0, 1]")


def loss_and_gradient(net, batch, config, dropout_mask=None, batch_index=None):
    """Mini-batch loss and its exact gradient with respect to ``net.params()``.

    The loss is the batch mean of the per-example loss plus
    ``l2_coeff * sum(W**2)`` over weight matrices (biases excluded). For a
    stacked net the returned loss is the sum of the member losses, so each
    member's gradient is exactly that of its own loss.
    """
    X, Y = batch
    X = _check_input(net, X)
    Y = np.asarray(Y, dtype=net.dtype)
    if X.shape[-2] == 0:
        raise ValueError("empty batch")
    masks = _check_masks(net, dropout_mask)
    inputs, hidden, out = _forward_trace(net, X, masks)
    B = X.shape[-2]

    if config.loss == "mse":
        if Y.shape[-1] != out.shape[-1]:
            raise ShapeError(f"target width {Y.shape[-1]} != output width {out.shape[-1]}")
        r = out - Y
        D = out.shape[-1]
        per_member = np.sum(r * r, axis=(-2, -1)) / (B * D)
        dout = r * (2.0 / (B * D))
    else:
        if net.head != "gaussian":
            raise ValueError("gaussian_nll loss needs a gaussian-head network")
        D = out.shape[-1] // 2
        if Y.shape[-1] != D:
            raise ShapeError(f"target width {Y.shape[-1]} != mean width {D}")
        mu, raw = out[..., :D], out[..., D:]
        s = np.clip(raw, -LOGVAR_CLAMP, LOGVAR_CLAMP)
        inv = np.exp(-s)
        r = Y - mu
        per_member = np.sum(0.5 * s + 0.5 * r * r * inv, axis=(-2, -1)) / B
        dmu = -r * inv / B
        ds = (0.5 - 0.5 * r * r * inv) / B
        ds = ds * ((raw >= -LOGVAR_CLAMP) & (raw <= LOGVAR_CLAMP))
        dout = np.concatenate([dmu, ds], axis=-1)

    l2 = config.l2_coeff
    if l2:
        per_member = per_member + l2 * sum(np.sum(W * W, axis=(-2, -1)) for W in net.weights)
    loss = float(np.sum(per_member))
    if not np.isfinite(loss):
        raise TrainingDivergenceError(batch_index, loss=loss)

    dact = _ACTIVATIONS[net.activation][1]
    grads = [None] * (2 * len(net.weights))
    dz = dout
    for k in range(len(net.weights) - 1, -1, -1):
        W = net.weights[k]
        gW = np.swapaxes(inputs[k], -1, -2) @ dz
        if gW.shape != W.shape:
            gW = np.broadcast_to(gW, W.shape).copy()
        if l2:
            gW += (2.0 * l2) * W
        grads[2 * k] = gW
        grads[2 * k + 1] = dz.sum(axis=-2)
        if k:
            da = dz @ np.swapaxes(W, -1, -2)
            if masks is not None:
                da = da * masks[k - 1]
            dz = da * dact(hidden[k - 1])
    return loss, grads


@dataclass
class AdamState:
    first_moment: list
    second_moment: list
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.step_count < 0 or not self.learning_rate > 0 or not self.epsilon > 0:
            raise ValueError("invalid ADAM hyperparameters")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("ADAM betas must lie in (0, 1)")


def adam_init(params, learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
    params = params.params() if isinstance(params, DenseNet) else params
    return AdamState(
        first_moment=[np.zeros_like(p) for p in params],
        second_moment=[np.zeros_like(p) for p in params],
        learning_rate=learning_rate, beta1=beta1, beta2=beta2, epsilon=epsilon,
    )


def _adam_kernel(p, g, m, v, state, t):
    """In-place ADAM update of flat or shaped arrays ``p``, ``m``, ``v``."""
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    denom = np.sqrt(v / c2)
    denom += state.epsilon
    p -= (state.learning_rate / c1) * m / denom


def adam_step(params, grads, state):
    """One bias-corrected ADAM update.

    ``params`` is a :class:`DenseNet` or a list of arrays; the same kind is
    returned together with a new state. Inputs are not modified.
    """
    net = params if isinstance(params, DenseNet) else None
    plist = net.params() if net is not None else list(params)
    if len(grads) != len(plist) or len(state.first_moment) != len(plist):
        raise ShapeError("parameter, gradient and moment lists differ in length")
    t = state.step_count + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(plist, grads, state.first_moment, state.second_moment):
        if not (p.shape == g.shape == m.shape == v.shape):
            raise ShapeError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
        p, m, v = p.copy(), m.copy(), v.copy()
        _adam_kernel(p, np.asarray(g, dtype=p.dtype), m, v, state, t)
        new_p.append(p)
        new_m.append(m)
        new_v.append(v)
    new_state = replace(state, first_moment=new_m, second_moment=new_v, step_count=t)
    return (net.with_params(new_p) if net is not None else new_p), new_state


class _FlatParams:
    """Parameters, moments and gradients packed into contiguous buffers."""

    def __init__(self, net):
        plist = net.params()
        self.shapes = [p.shape for p in plist]
        self.flat = np.concatenate([p.ravel() for p in plist])
        self.views = []
        offset = 0
        for p in plist:
            self.views.append(self.flat[offset:offset + p.size].reshape(p.shape))
            offset += p.size
        self.net = net.with_params(self.views, validate=False)

    def pack(self, grads):
        return np.concatenate([g.ravel() for g in grads])


def flush_tiny(a):
    """Zero entries below sqrt(tiny) in place.

    Weight decay on dead ReLU units drives weights into the subnormal range,
    which slows matrix products severalfold. Any product of a surviving entry
    with an activation of the same size or larger stays normal; the dropped
    contributions are below the dtype's resolution of any realistic output.
    """
    bound = np.sqrt(np.finfo(a.dtype).tiny)
    a[np.abs(a) < bound] = 0
    return a


def train(net, dataset, config, member_seeds=None):
    """Mini-batch ADAM training for ``config.epochs`` full passes over ``dataset``.

    ``dataset`` is an ``(X, Y)`` pair of arrays. Each pass reshuffles the data;
    a stacked net gets one shuffle stream per member (seeded by
    ``member_seeds`` or spawned from ``config.rng_seed``). The final short
    batch of a pass is kept. Dropout masks are redrawn for every batch.
    """
    X, Y = dataset
    X = _check_input(net, X)
    Y = np.asarray(Y, dtype=net.dtype)
    if Y.ndim == 1:
        Y = Y[:, None]
    n = X.shape[0]
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if Y.shape[0] != n:
        raise ShapeError("inputs and targets differ in length")
    if config.epochs == 0:
        return net

    M = net.n_members
    seq = np.random.SeedSequence(config.rng_seed)
    if member_seeds is None:
        shuffle_rngs = [np.random.default_rng(s) for s in seq.spawn(M or 1)]
    else:
        shuffle_rngs = [np.random.default_rng(s) for s in member_seeds]
    if len(shuffle_rngs) != (M or 1):
        raise ValueError("need one shuffle seed per member")
    mask_rng = np.random.default_rng([config.rng_seed, 0xD20])

    packed = _FlatParams(net)
    net = packed.net
    state = adam_init([packed.flat], learning_rate=config.learning_rate)
    m, v = state.first_moment[0], state.second_moment[0]
    keep = config.dropout_keep_prob
    bs = config.batch_size
    batch_index = 0
    for epoch in range(config.epochs):
        if M is None:
            order = shuffle_rngs[0].permutation(n)
        else:
            order = np.stack([r.permutation(n) for r in shuffle_rngs])
        for start in range(0, n, bs):
            idx = order[..., start:start + bs]
            xb, yb = X[idx], Y[idx]
            masks = sample_dropout_masks(net, xb.shape[:-1], keep, mask_rng)
            try:
                _, grads = loss_and_gradient(net, (xb, yb), config, masks, batch_index)
            except TrainingDivergenceError as err:
                raise TrainingDivergenceError(batch_index, epoch, err.loss) from None
            state.step_count += 1
            _adam_kernel(packed.flat, packed.pack(grads), m, v, state, state.step_count)
            batch_index += 1
    if not np.all(np.isfinite(packed.flat)):
        raise TrainingDivergenceError(batch_index - 1, config.epochs - 1)
    flush_tiny(packed.flat)
    return net.with_params([p.copy() for p in packed.views])
