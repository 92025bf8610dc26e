"""Small MLPs recorded on the tape, Adam, and bit-exact checkpoints.

Policy and value nets are plain feed-forward stacks.  Two forward styles:

* vec   -- one sample as a 1-D vector, matvec chain (grid evaluation, specs).
* rows  -- a whole Monte Carlo chunk as (paths, features) matrices.  The
           first layer is applied block-by-block (t, X, Y arrive as separate
           Vars), and biases enter through a ones-column matmul so everything
           stays inside the 2-D primitive set.

Both styles share one parameter store, so Adam and checkpoints see plain
per-layer numpy arrays regardless of how the forward was recorded.
"""

import json
import struct

import numpy as np

from . import tape as T
from .rng import substream

ACTIVATIONS = ("leaky_relu", "tanh")
TRANSFORMS = ("identity", "negative_softplus")
LEAKY_SLOPE = 0.01


class MlpSpec:
    def __init__(self, input_dim, hidden, output_dim,
                 activation="leaky_relu", output_transform="identity"):
        hidden = tuple(int(h) for h in hidden)
        if input_dim < 1 or output_dim < 1 or any(h < 1 for h in hidden):
            raise ValueError("network widths must be positive")
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if output_transform not in TRANSFORMS:
            raise ValueError(f"output_transform must be one of {TRANSFORMS}")
        self.input_dim = int(input_dim)
        self.hidden = hidden
        self.output_dim = int(output_dim)
        self.activation = activation
        self.output_transform = output_transform

    def layer_dims(self):
        dims = (self.input_dim,) + self.hidden + (self.output_dim,)
        return list(zip(dims[1:], dims[:-1]))  # (fan_out, fan_in) per layer

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "output_dim": self.output_dim,
            "activation": self.activation,
            "output_transform": self.output_transform,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["input_dim"], d["hidden"], d["output_dim"],
                   d["activation"], d["output_transform"])

    def __eq__(self, other):
        return isinstance(other, MlpSpec) and self.to_dict() == other.to_dict()


class MlpParams:
    """Per-layer weights (fan_out, fan_in) and biases (fan_out,)."""

    def __init__(self, spec, weights, biases):
        if len(weights) != len(spec.layer_dims()) or len(biases) != len(weights):
            raise ValueError("layer count mismatch")
        for (o, i), W, b in zip(spec.layer_dims(), weights, biases):
            if W.shape != (o, i) or b.shape != (o,):
                raise ValueError("parameter shape inconsistent with spec")
        self.spec = spec
        self.weights = [np.ascontiguousarray(W, dtype=np.float64) for W in weights]
        self.biases = [np.ascontiguousarray(b, dtype=np.float64) for b in biases]

    def arrays(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out.append(W)
            out.append(b)
        return out

    def replace_arrays(self, arrays):
        ws = arrays[0::2]
        bs = arrays[1::2]
        return MlpParams(self.spec, ws, bs)

    def copy(self):
        return MlpParams(self.spec, [W.copy() for W in self.weights],
                         [b.copy() for b in self.biases])


def init(spec, seed, name="mlp-init"):
    """Uniform(+-sqrt(1/fan_in)) weights, zero biases, final layer scaled 0.01."""
    rng = substream(seed, name)
    ws, bs = [], []
    dims = spec.layer_dims()
    for li, (o, i) in enumerate(dims):
        s = np.sqrt(1.0 / i)
        W = rng.uniform(-s, s, size=(o, i))
        if li == len(dims) - 1:
            W = W * 0.01
        ws.append(W)
        bs.append(np.zeros(o))
    return MlpParams(spec, ws, bs)


def _activate(tape, h, spec):
    if spec.activation == "leaky_relu":
        return T.record(tape, "leaky_relu", h, slope=LEAKY_SLOPE)
    return T.record(tape, "tanh", h)


def _transform(tape, o, spec):
    if spec.output_transform == "negative_softplus":
        return T.record(tape, "mul", T.record(tape, "softplus", o), -1.0)
    return o


def forward(params, x, tape):
    """Single-sample forward; x is a length-input_dim vector or Var."""
    spec = params.spec
    x = x if isinstance(x, T.Var) else tape.leaf(np.asarray(x, dtype=np.float64))
    if x.shape != (spec.input_dim,):
        raise ValueError(f"input shape {x.shape}, want ({spec.input_dim},)")
    h = x
    last = len(params.weights) - 1
    for li, (W, b) in enumerate(zip(params.weights, params.biases)):
        h = T.record(tape, "add", T.record(tape, "matvec", tape.leaf(W), h), tape.leaf(b))
        if li < last:
            h = _activate(tape, h, spec)
    return _transform(tape, h, spec)


def forward_np(params, X):
    """Pure-numpy batched forward, (batch, input_dim) -> (batch, output_dim)."""
    spec = params.spec
    X = np.asarray(X, dtype=np.float64)
    squeeze = X.ndim == 1
    H = X.reshape(1, -1) if squeeze else X
    if H.shape[1] != spec.input_dim:
        raise ValueError("bad input width")
    last = len(params.weights) - 1
    for li, (W, b) in enumerate(zip(params.weights, params.biases)):
        H = H @ W.T + b
        if li < last:
            if spec.activation == "leaky_relu":
                H = np.where(H > 0.0, H, LEAKY_SLOPE * H)
            else:
                H = np.tanh(H)
    if spec.output_transform == "negative_softplus":
        H = -np.logaddexp(0.0, H)
    return H[0] if squeeze else H


class TapeMlp:
    """Parameters loaded as leaves on one tape, rows-style batched forward.

    block_dims splits the first-layer input columns, so callers can feed
    [t, X, Y] as separate (paths, d_i) Vars without a concat primitive.
    """

    def __init__(self, tape, params, block_dims=None):
        spec = params.spec
        if block_dims is None:
            block_dims = [spec.input_dim]
        if sum(block_dims) != spec.input_dim:
            raise ValueError("block dims must sum to input_dim")
        self.tape = tape
        self.spec = spec
        self.block_dims = list(block_dims)
        self.w0_blocks = []
        cols = np.cumsum([0] + self.block_dims)
        W0 = params.weights[0]
        for a, b in zip(cols[:-1], cols[1:]):
            self.w0_blocks.append(tape.leaf(np.ascontiguousarray(W0[:, a:b])))
        self.w_rest = [tape.leaf(W) for W in params.weights[1:]]
        self.b_leaves = [tape.leaf(b.reshape(1, -1)) for b in params.biases]
        self._ones = {}

    def _ones_col(self, m):
        if m not in self._ones:
            self._ones[m] = self.tape.leaf(np.ones((m, 1)))
        return self._ones[m]

    def rows(self, blocks):
        """Forward for a list of (paths, d_i) Vars matching block_dims."""
        tape = self.tape
        if len(blocks) != len(self.block_dims):
            raise ValueError("wrong number of input blocks")
        m = blocks[0].value.shape[0]
        ones = self._ones_col(m)
        h = None
        for blk, Wb in zip(blocks, self.w0_blocks):
            term = T.record(tape, "matmul", blk, Wb, tb=True)
            h = term if h is None else T.record(tape, "add", h, term)
        h = T.record(tape, "add", h, T.record(tape, "matmul", ones, self.b_leaves[0]))
        for li, W in enumerate(self.w_rest):
            h = _activate(tape, h, self.spec)
            h = T.record(tape, "add",
                         T.record(tape, "matmul", h, W, tb=True),
                         T.record(tape, "matmul", ones, self.b_leaves[li + 1]))
        return _transform(tape, h, self.spec)

    def wrt_leaves(self):
        """Flat list of every parameter leaf, for backward(wrt=...)."""
        return list(self.w0_blocks) + self.w_rest + self.b_leaves

    def collect_grads(self, grads):
        """Adjoints reassembled to MlpParams.arrays() shapes."""
        out = []
        g0 = np.concatenate([np.asarray(grads[v]) for v in self.w0_blocks], axis=1)
        out.append(g0)
        out.append(np.asarray(grads[self.b_leaves[0]]).ravel())
        for W, b in zip(self.w_rest, self.b_leaves[1:]):
            out.append(np.asarray(grads[W]))
            out.append(np.asarray(grads[b]).ravel())
        return out


class AdamState:
    """Bias-corrected Adam over a list of arrays; descent direction."""

    def __init__(self, arrays, lr, beta1=0.9, beta2=0.999, eps=1e-8, clip=None):
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip = clip


def clip_global_norm(grads, max_norm):
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        return [g * scale for g in grads], total
    return list(grads), total


def adam_step(arrays, grads, state, lr=None):
    """One descent step; pass grads of -J for ascent on J. Returns new arrays."""
    if len(grads) != len(arrays):
        raise ValueError("gradient list does not cover parameters")
    if state.clip is not None:
        grads, _ = clip_global_norm(grads, state.clip)
    state.t += 1
    lr = state.lr if lr is None else float(lr)
    b1, b2, eps = state.beta1, state.beta2, state.eps
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    out = []
    for i, (a, g) in enumerate(zip(arrays, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        mhat = state.m[i] / bc1
        vhat = state.v[i] / bc2
        out.append(a - lr * mhat / (np.sqrt(vhat) + eps))
    return out


def multistep_lr(base, step, total, milestones=(0.4, 0.7, 0.9), factor=0.5):
    lr = base
    for frac in milestones:
        if step >= frac * total:
            lr *= factor
    return lr


def save_checkpoint(path, params, extra=None):
    """JSON header + float64 little-endian blob; round-trips bit-exactly."""
    arrays = params.arrays()
    index = []
    for i, a in enumerate(arrays):
        index.append({"pos": i, "shape": list(a.shape), "nbytes": a.nbytes})
    header = {"spec": params.spec.to_dict(), "index": index, "extra": extra or {}}
    hj = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(hj)))
        f.write(hj)
        for a in arrays:
            blob = np.ascontiguousarray(a, dtype="<f8").tobytes()
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)


def load_checkpoint(path):
    with open(path, "rb") as f:
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        spec = MlpSpec.from_dict(header["spec"])
        arrays = []
        for ent in header["index"]:
            (blen,) = struct.unpack("<Q", f.read(8))
            raw = f.read(blen)
            a = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(ent["shape"])
            arrays.append(a)
    params = MlpParams(spec, arrays[0::2], arrays[1::2])
    return params, header.get("extra", {})
