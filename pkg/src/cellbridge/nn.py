"""Dense numerical core: named parameter storage, a fixed-depth tanh regressor
with analytic gradients, and an adaptive optimizer with decoupled weight decay.

Everything runs in float64. Forward/backward are pure given a parameter
snapshot; gradient accumulation and optimizer steps assume a single writer.
"""

import struct

import numpy as np

from .errors import DimensionError, StateError

_MAGIC = b"CBPS\x01"

# Sinusoidal encoding of normalized time, 8 geometric frequencies x (sin, cos).
N_TIME_FEATURES = 16
_TIME_FREQS = np.geomspace(1.0, 1000.0, N_TIME_FEATURES // 2)


def time_features(t, horizon):
    """Encode time(s) t in [0, horizon] as sinusoidal features, shape (B, 16)."""
    tau = np.atleast_1d(np.asarray(t, dtype=np.float64)) / horizon
    ang = tau[:, None] * _TIME_FREQS[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class OptimizerConfig:
    """Hyperparameters of the adaptive step (AdamW-style decoupled decay)."""

    def __init__(self, learning_rate=1e-3, beta1=0.9, beta2=0.999,
                 epsilon=1e-8, weight_decay=0.0):
        if learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
            raise ValueError("beta1/beta2 must lie in (0, 1)")
        if epsilon <= 0 or weight_decay < 0:
            raise ValueError("epsilon must be positive, weight_decay nonnegative")
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.weight_decay = float(weight_decay)


class ParameterSet:
    """Named float64 arrays with paired gradient and moment storage.

    Arrays are registered once, in a fixed declaration order that also fixes
    the serialization layout. Gradients and first/second moments always
    shape-match their parameters.
    """

    def __init__(self):
        self._order = []
        self.values = {}
        self.grads = {}
        self.m = {}
        self.v = {}
        self.step_count = 0

    def register(self, name, array):
        if name in self.values:
            raise ValueError(f"parameter {name!r} already registered")
        arr = np.ascontiguousarray(array, dtype=np.float64)
        self._order.append(name)
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)
        return arr

    @property
    def names(self):
        return list(self._order)

    def n_parameters(self):
        return sum(a.size for a in self.values.values())

    def zero_grads(self):
        for g in self.grads.values():
            g[...] = 0.0

    def save(self, path):
        """Write a flat binary checkpoint: shapes then values in declaration
        order, plus step_count. Round-trips bit-exactly."""
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<qq", self.step_count, len(self._order)))
            for name in self._order:
                arr = self.values[name]
                enc = name.encode("utf-8")
                fh.write(struct.pack("<q", len(enc)))
                fh.write(enc)
                fh.write(struct.pack("<q", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.read_from(fh)

    @classmethod
    def read_from(cls, fh):
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError("not a parameter checkpoint")
        step_count, n_arrays = struct.unpack("<qq", fh.read(16))
        ps = cls()
        for _ in range(n_arrays):
            (name_len,) = struct.unpack("<q", fh.read(8))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<q", fh.read(8))
            shape = struct.unpack(f"<{ndim}q", fh.read(8 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
            ps.register(name, data.copy())
        ps.step_count = step_count
        return ps

    def write_to(self, fh):
        fh.write(_MAGIC)
        fh.write(struct.pack("<qq", self.step_count, len(self._order)))
        for name in self._order:
            arr = self.values[name]
            enc = name.encode("utf-8")
            fh.write(struct.pack("<q", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def glorot_uniform(rng, fan_in, fan_out, shape):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


class MLP:
    """Feed-forward regressor: `depth` tanh hidden layers plus a linear head.

    Parameters are registered into an externally owned ParameterSet so that
    several components (network, embedding tables) can share one optimizer.
    """

    def __init__(self, params, prefix, in_dim, out_dim, hidden=256, depth=3,
                 rng=None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.params = params
        self.prefix = prefix
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.depth = depth
        sizes = [in_dim] + [hidden] * depth + [out_dim]
        self._weight_names = []
        self._bias_names = []
        for i in range(len(sizes) - 1):
            wname, bname = f"{prefix}w{i}", f"{prefix}b{i}"
            params.register(wname, glorot_uniform(rng, sizes[i], sizes[i + 1],
                                                  (sizes[i], sizes[i + 1])))
            params.register(bname, np.zeros(sizes[i + 1]))
            self._weight_names.append(wname)
            self._bias_names.append(bname)

    def forward(self, x, record=False):
        """Run the network on a (B, in_dim) batch.

        With `record`, also returns the cached activations needed for an
        exact backward pass.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(
                f"expected input of width {self.in_dim}, got shape {x.shape}")
        acts = [x]
        h = x
        vals = self.params.values
        for i in range(self.depth):
            h = np.tanh(h @ vals[self._weight_names[i]] + vals[self._bias_names[i]])
            acts.append(h)
        out = h @ vals[self._weight_names[-1]] + vals[self._bias_names[-1]]
        if record:
            return out, acts
        return out

    def backward(self, cache, grad_out):
        """Accumulate dL/dtheta into the parameter set's grads and return
        dL/dinput. `cache` must come from a matching forward(record=True)."""
        if cache is None:
            raise StateError("backward requires activations recorded by forward")
        grad_out = np.asarray(grad_out, dtype=np.float64)
        if grad_out.shape != (cache[0].shape[0], self.out_dim):
            raise DimensionError(
                f"upstream gradient shape {grad_out.shape} does not match output")
        vals, grads = self.params.values, self.params.grads
        delta = grad_out
        for i in range(self.depth, -1, -1):
            a_prev = cache[i]
            grads[self._weight_names[i]] += a_prev.T @ delta
            grads[self._bias_names[i]] += delta.sum(axis=0)
            delta = delta @ vals[self._weight_names[i]].T
            if i > 0:
                # tanh'(z) expressed through the cached activation
                delta = delta * (1.0 - cache[i] ** 2)
        return delta


def optimizer_step(params, cfg):
    """Bias-corrected adaptive-moment update with decoupled weight decay.

    Decay multiplies parameters by (1 - lr * weight_decay) directly rather
    than flowing through the gradient. Gradients are zeroed afterwards.
    """
    params.step_count += 1
    t = params.step_count
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    lr = cfg.learning_rate
    for name in params.names:
        g = params.grads[name]
        m = params.m[name]
        v = params.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p = params.values[name]
        if cfg.weight_decay:
            p *= 1.0 - lr * cfg.weight_decay
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)
        g[...] = 0.0
