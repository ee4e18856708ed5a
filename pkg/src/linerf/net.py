"""Dense MLPs with explicit forward/backward passes, Adam, and checkpoint I/O.

Every learnable map in the package (trunk, density head, color head) is a
`NetParams`. Gradients are hand-derived reverse mode over a `ForwardTape`;
there is no autograd framework underneath, which keeps the renderer's custom
backward on the same code path as the plain network backward.

Conventions: weights are (out, in) row-major, inputs are (batch, in) or (in,),
skip connections re-concatenate the network input in front of the named layer.
Parameter gradients returned by `net_backward` are summed over the batch.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, FormatError, TrainingError

ACTIVATIONS = ("relu", "sigmoid", "softplus", "identity")

_MAGIC = b"LNRF"
_VERSION = 1


def _sigmoid(z):
    z = np.asarray(z)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def apply_activation(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return _sigmoid(z)
    if name == "softplus":
        return np.logaddexp(0.0, z)
    if name == "identity":
        return z
    raise ConfigurationError(f"unknown activation {name!r}")


def activation_grad(name, pre, post):
    """Derivative of the activation, from pre-activation `pre` / output `post`."""
    if name == "relu":
        return (pre > 0.0).astype(pre.dtype)
    if name == "sigmoid":
        return post * (1.0 - post)
    if name == "softplus":
        return _sigmoid(pre)
    if name == "identity":
        return np.ones_like(pre)
    raise ConfigurationError(f"unknown activation {name!r}")


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ConfigurationError(f"layer dims must be >= 1, got {self}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")


@dataclass
class NetParams:
    """An MLP: per-layer weights/biases/activations plus skip layer indices.

    `skips` holds indices of layers whose input is concat(previous output,
    network input); index 0 is disallowed (it would concatenate the input
    with itself).
    """

    input_dim: int
    weights: list
    biases: list
    activations: list
    skips: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        self.skips = frozenset(int(s) for s in self.skips)
        n = len(self.weights)
        if not (n == len(self.biases) == len(self.activations)):
            raise ConfigurationError("weights/biases/activations length mismatch")
        if n == 0:
            raise ConfigurationError("network needs at least one layer")
        for s in self.skips:
            if not 1 <= s < n:
                raise ConfigurationError(f"skip index {s} outside 1..{n - 1}")
        width = self.input_dim
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ConfigurationError(f"layer {i}: unknown activation {act!r}")
            expect_in = width + (self.input_dim if i in self.skips else 0)
            if w.ndim != 2 or w.shape[1] != expect_in:
                raise ConfigurationError(
                    f"layer {i}: weight shape {w.shape} incompatible with input width {expect_in}"
                )
            if b.shape != (w.shape[0],):
                raise ConfigurationError(f"layer {i}: bias shape {b.shape} != ({w.shape[0]},)")
            width = w.shape[0]

    @property
    def depth(self):
        return len(self.weights)

    @property
    def output_dim(self):
        return self.weights[-1].shape[0]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def specs(self):
        return [
            LayerSpec(w.shape[1], w.shape[0], a)
            for w, a in zip(self.weights, self.activations)
        ]

    def arrays(self):
        """Flat list of parameter arrays (weights then bias, per layer)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def astype(self, dtype):
        return NetParams(
            self.input_dim,
            [w.astype(dtype) for w in self.weights],
            [b.astype(dtype) for b in self.biases],
            list(self.activations),
            self.skips,
        )

    def copy(self):
        return self.astype(self.dtype)


@dataclass
class NetGrads:
    weights: list
    biases: list

    def arrays(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def add_(self, other):
        for a, b in zip(self.weights, other.weights):
            a += b
        for a, b in zip(self.biases, other.biases):
            a += b
        return self


def zero_grads(params):
    return NetGrads(
        [np.zeros_like(w) for w in params.weights],
        [np.zeros_like(b) for b in params.biases],
    )


@dataclass
class ForwardTape:
    """Cached intermediates of one forward pass, consumed by net_backward."""

    x0: np.ndarray        # (B, input_dim)
    inputs: list          # per layer, the matrix actually multiplied (after any concat)
    pres: list            # per layer, pre-activations
    posts: list           # per layer, post-activations
    squeezed: bool        # True when the caller passed a single vector


def init_net(rng, specs, skips=(), dtype=np.float64):
    """He fan-in init for relu/softplus layers, Xavier-uniform for the rest.

    Biases start at zero; shift them afterwards if a head needs an offset.
    """
    skips = frozenset(skips)
    weights, biases, acts = [], [], []
    for spec in specs:
        if spec.activation in ("relu", "softplus"):
            w = rng.normal(0.0, np.sqrt(2.0 / spec.in_dim), size=(spec.out_dim, spec.in_dim))
        else:
            bound = np.sqrt(6.0 / (spec.in_dim + spec.out_dim))
            w = rng.uniform(-bound, bound, size=(spec.out_dim, spec.in_dim))
        weights.append(w.astype(dtype))
        biases.append(np.zeros(spec.out_dim, dtype=dtype))
        acts.append(spec.activation)
    input_dim = specs[0].in_dim
    return NetParams(input_dim, weights, biases, acts, skips)


def net_forward(params, x):
    """Evaluate the network. Returns (output, tape); accepts (in,) or (B, in)."""
    x = np.asarray(x, dtype=params.dtype)
    squeezed = x.ndim == 1
    a = np.atleast_2d(x)
    if a.shape[1] != params.input_dim:
        raise ConfigurationError(
            f"input width {a.shape[1]} != network input_dim {params.input_dim}"
        )
    x0 = a
    inputs, pres, posts = [], [], []
    for i in range(params.depth):
        if i in params.skips:
            a = np.concatenate([a, x0], axis=1)
        inputs.append(a)
        z = a @ params.weights[i].T
        z += params.biases[i]
        a = apply_activation(params.activations[i], z)
        pres.append(z)
        posts.append(a)
    tape = ForwardTape(x0=x0, inputs=inputs, pres=pres, posts=posts, squeezed=squeezed)
    return (a[0] if squeezed else a), tape


def net_backward(params, tape, grad_out):
    """Reverse pass. grad_out is dL/d(output), shaped like the forward output.

    Returns (NetGrads summed over the batch, dL/d(input) matching the input shape).
    """
    g = np.asarray(grad_out, dtype=params.dtype)
    g = np.atleast_2d(g)
    if g.shape != tape.posts[-1].shape:
        raise ConfigurationError(
            f"grad_out shape {g.shape} != output shape {tape.posts[-1].shape}"
        )
    d_in = params.input_dim
    gx0 = np.zeros_like(tape.x0)
    dws = [None] * params.depth
    dbs = [None] * params.depth
    for i in reversed(range(params.depth)):
        g = g * activation_grad(params.activations[i], tape.pres[i], tape.posts[i])
        dws[i] = g.T @ tape.inputs[i]
        dbs[i] = g.sum(axis=0)
        g = g @ params.weights[i]
        if i in params.skips:
            gx0 += g[:, -d_in:]
            g = g[:, :-d_in]
    gx0 += g
    return NetGrads(dws, dbs), (gx0[0] if tape.squeezed else gx0)


# ----------------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    """Bias-corrected Adam moments for a flat list of parameter arrays."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = None
    v: list = None

    @classmethod
    def for_arrays(cls, arrays, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(
            lr=lr, beta1=beta1, beta2=beta2, eps=eps, t=0,
            m=[np.zeros_like(a) for a in arrays],
            v=[np.zeros_like(a) for a in arrays],
        )

    @classmethod
    def for_net(cls, params, lr=1e-3, **kw):
        return cls.for_arrays(params.arrays(), lr=lr, **kw)


def adam_update_arrays(arrays, grad_arrays, state, lr=None):
    """One Adam step over matching lists of arrays; updates in place."""
    if lr is None:
        lr = state.lr
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for k, (theta, g) in enumerate(zip(arrays, grad_arrays)):
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter array {k}")
        m = state.m[k]
        v = state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return arrays, state


def adam_step(params, grads, state, lr=None):
    """One Adam step on a NetParams; mutates params/state and returns them."""
    adam_update_arrays(params.arrays(), grads.arrays(), state, lr=lr)
    return params, state


# ----------------------------------------------------------------- checkpoint format

_ACT_CODE = {name: i for i, name in enumerate(ACTIVATIONS)}
_CODE_ACT = {i: name for name, i in _ACT_CODE.items()}


def write_net_blob(fh, params):
    """Serialize one NetParams to an open binary stream (little-endian, f64)."""
    fh.write(_MAGIC)
    fh.write(struct.pack("<III", _VERSION, params.depth, params.input_dim))
    skips = sorted(params.skips)
    fh.write(struct.pack("<I", len(skips)))
    for s in skips:
        fh.write(struct.pack("<I", s))
    for w, b, act in zip(params.weights, params.biases, params.activations):
        fh.write(struct.pack("<III", w.shape[1], w.shape[0], _ACT_CODE[act]))
        fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def read_net_blob(fh, dtype=np.float64):
    """Inverse of write_net_blob. Raises FormatError on malformed data."""
    magic = fh.read(4)
    if magic != _MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}, expected {_MAGIC!r}")
    header = fh.read(12)
    if len(header) != 12:
        raise FormatError("truncated checkpoint header")
    version, depth, input_dim = struct.unpack("<III", header)
    if version != _VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (n_skips,) = struct.unpack("<I", fh.read(4))
    skips = [struct.unpack("<I", fh.read(4))[0] for _ in range(n_skips)]
    weights, biases, acts = [], [], []
    for _ in range(depth):
        raw = fh.read(12)
        if len(raw) != 12:
            raise FormatError("truncated layer header")
        in_dim, out_dim, act_code = struct.unpack("<III", raw)
        if act_code not in _CODE_ACT:
            raise FormatError(f"unknown activation code {act_code}")
        nbytes = 8 * in_dim * out_dim
        buf = fh.read(nbytes)
        if len(buf) != nbytes:
            raise FormatError("truncated weight matrix")
        w = np.frombuffer(buf, dtype="<f8").reshape(out_dim, in_dim)
        buf = fh.read(8 * out_dim)
        if len(buf) != 8 * out_dim:
            raise FormatError("truncated bias vector")
        b = np.frombuffer(buf, dtype="<f8")
        weights.append(w.astype(dtype))
        biases.append(b.astype(dtype))
        acts.append(_CODE_ACT[act_code])
    return NetParams(input_dim, weights, biases, acts, frozenset(skips))


def save_net(path, params):
    with open(path, "wb") as fh:
        write_net_blob(fh, params)


def load_net(path, dtype=np.float64):
    with open(path, "rb") as fh:
        params = read_net_blob(fh, dtype=dtype)
        if fh.read(1):
            raise FormatError("trailing bytes after checkpoint payload")
    return params


def net_blob_bytes(params):
    buf = io.BytesIO()
    write_net_blob(buf, params)
    return buf.getvalue()
