"""Score networks: direct score MLPs, time-conditional MLPs and energy MLPs.

Parameters live in one flat float64 vector ``theta``; the per-layer weight
and bias tensors are views into it, so an in-place update of ``theta`` is
immediately visible to the next forward pass.
"""

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .errors import CheckpointError, ContractError, DimensionError, NonFiniteError, ParameterError

ACTIVATIONS = ("tanh", "softplus", "square")

CHECKPOINT_MAGIC = b"SMLB"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden: tuple = (300, 300)
    activation: str = "tanh"
    output_dim: int = None
    time_conditional: bool = False
    mode: str = "score"
    # divide the network output by sigma_t (time-conditional nets only)
    scale_by_sigma: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.output_dim is None:
            object.__setattr__(self, "output_dim", 1 if self.mode == "energy" else self.input_dim)
        if self.mode not in ("score", "energy"):
            raise ParameterError(f"unknown mode {self.mode!r}")
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")
        if self.input_dim <= 0 or any(h <= 0 for h in self.hidden):
            raise ParameterError("layer widths must be positive")
        want = 1 if self.mode == "energy" else self.input_dim
        if self.output_dim != want:
            raise ParameterError(f"{self.mode} mode needs output_dim == {want}, got {self.output_dim}")
        if self.scale_by_sigma and not self.time_conditional:
            raise ParameterError("scale_by_sigma requires a time-conditional net")

    @property
    def fan_in(self):
        return self.input_dim + (1 if self.time_conditional else 0)

    def layer_shapes(self):
        widths = [self.fan_in, *self.hidden, self.output_dim]
        return [(a, b) for a, b in zip(widths[:-1], widths[1:])]

    def param_count(self):
        return sum((a + 1) * b for a, b in self.layer_shapes())


class ScoreNet:
    """An MLP realising s(x), s(x, t), or the energy f(x) with s = grad_x f.

    Time-conditional nets need ``sde`` (anything with ``time_feature(t)`` and
    ``marginal_std(t)``) to turn ``t`` into the extra input feature.
    """

    def __init__(self, config: MlpConfig, theta, sde=None):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (config.param_count(),):
            raise DimensionError(f"expected {config.param_count()} parameters, got {theta.shape}")
        self.config = config
        self.theta = theta
        self.sde = sde
        self._leaves = None

    @property
    def mode(self):
        return self.config.mode

    @property
    def input_dim(self):
        return self.config.input_dim

    def layers(self):
        """(W, b) numpy views into theta, W of shape (fan_in, fan_out)."""
        out, pos = [], 0
        for a, b in self.config.layer_shapes():
            W = self.theta[pos:pos + a * b].reshape(a, b)
            pos += a * b
            out.append((W, self.theta[pos:pos + b]))
            pos += b
        return out

    @property
    def leaves(self):
        """Leaf tensors (W1, b1, W2, b2, ...) sharing memory with theta."""
        if self._leaves is None:
            self._leaves = [ad.Tensor(p, requires_grad=True) for wb in self.layers() for p in wb]
        return self._leaves

    def flatten(self, grads):
        """Concatenate per-leaf gradients into one vector aligned with theta."""
        return np.concatenate([np.asarray(g.data).reshape(-1) for g in grads])

    def copy(self):
        return ScoreNet(self.config, self.theta.copy(), self.sde)

    # ---------------------------------------------------------------- forward

    def _mlp(self, h):
        leaves = self.leaves
        n = len(leaves) // 2
        for k in range(n):
            h = ad.add_bias(ad.matmul(h, leaves[2 * k]), leaves[2 * k + 1])
            if k < n - 1:
                h = _activate(h, self.config.activation)
        return h

    def _inputs(self, x, t):
        cfg = self.config
        if x.shape[-1] != cfg.input_dim:
            raise DimensionError(f"input has dimension {x.shape[-1]}, net expects {cfg.input_dim}")
        if cfg.time_conditional:
            if t is None:
                raise ContractError("time-conditional net needs t")
            if self.sde is None:
                raise ContractError("time-conditional net has no SDE attached")
            feat = np.broadcast_to(np.asarray(self.sde.time_feature(t), dtype=np.float64), (x.shape[0],))
            return ad.concat([x, ad.Tensor(feat.reshape(-1, 1))], axis=1)
        return x

    def energy(self, x, t=None):
        """f(x) per row, shape (B,).  Energy mode only."""
        if self.mode != "energy":
            raise ContractError("energy() is only defined in energy mode")
        x, squeeze = _batched(x)
        f = ad.reshape(self._mlp(self._inputs(x, t)), (x.shape[0],))
        return ad.reshape(f, ()) if squeeze else f

    def forward(self, x, t=None, create_graph=True):
        """Score at ``x`` (shape (d,) or (B, d)); stays on the active tape.

        In energy mode the score is grad_x f from one backward pass, recorded
        when ``create_graph`` is set so that it can be differentiated again.
        """
        x, squeeze = _batched(x)
        if self.mode == "energy":
            if not x.requires_grad:
                x = ad.Tensor(x.data, requires_grad=True)
            f = self._mlp(self._inputs(x, t))
            s = ad.grad(ad.tsum(f), x, create_graph=create_graph)
        else:
            s = self._mlp(self._inputs(x, t))
        if self.config.scale_by_sigma:
            sig = np.broadcast_to(np.asarray(self.sde.marginal_std(t), dtype=np.float64), (x.shape[0],))
            s = ad.mul(s, ad.Tensor((1.0 / sig).reshape(-1, 1)))
        return ad.reshape(s, (s.shape[1],)) if squeeze else s

    __call__ = forward

    def score(self, x, t=None):
        """Plain numpy score evaluation; no graph is kept."""
        x = ad.Tensor(np.asarray(x, dtype=np.float64))
        with ad.Tape():
            if self.mode == "energy":
                return self.forward(x, t, create_graph=False).data
            with ad.no_grad():
                return self.forward(x, t).data

    # ------------------------------------------------------------ constructors

    @classmethod
    def linear(cls, A, b=None):
        """s(x) = A x + b as a net with no hidden layers."""
        A = np.asarray(A, dtype=np.float64)
        d = A.shape[0]
        cfg = MlpConfig(input_dim=d, hidden=())
        b = np.zeros(d) if b is None else np.asarray(b, dtype=np.float64)
        return cls(cfg, np.concatenate([A.T.reshape(-1), b]))


def _activate(h, kind):
    if kind == "tanh":
        return ad.tanh(h)
    if kind == "softplus":
        return ad.softplus(h)
    return ad.mul(h, h)


def _batched(x):
    x = ad.as_tensor(x)
    if x.ndim == 1:
        return ad.reshape(x, (1, x.shape[0])), True
    if x.ndim != 2:
        raise DimensionError(f"expected a vector or a batch of vectors, got shape {x.shape}")
    return x, False


def init(config: MlpConfig, seed: int, sde=None) -> ScoreNet:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    from .rng import stream

    rng = stream(seed, 0)
    parts = []
    for a, b in config.layer_shapes():
        bound = 1.0 / np.sqrt(a)
        parts.append(rng.uniform(-bound, bound, size=a * b))
        parts.append(np.zeros(b))
    return ScoreNet(config, np.concatenate(parts), sde)


def sgd_step(net: ScoreNet, grads, lr: float, check=False) -> ScoreNet:
    """theta <- theta - lr * grads, in place; returns ``net``."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != net.theta.shape:
        raise DimensionError(f"gradient has {grads.size} entries, net has {net.theta.size}")
    if lr < 0:
        raise ParameterError("learning rate must be non-negative")
    if check and not np.all(np.isfinite(grads)):
        raise NonFiniteError("non-finite gradient")
    net.theta -= lr * grads
    return net


class SGD:
    """Plain SGD with optional heavy-ball momentum."""

    def __init__(self, lr=1e-3, momentum=0.0):
        self.lr = lr
        self.momentum = momentum
        self._velocity = None

    def step(self, net, grads):
        if not self.momentum:
            return sgd_step(net, grads, self.lr)
        if self._velocity is None:
            self._velocity = np.zeros_like(net.theta)
        self._velocity *= self.momentum
        self._velocity += grads
        return sgd_step(net, self._velocity, self.lr)


class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8 by default)."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self._m = self._v = None
        self._t = 0

    def step(self, net, grads):
        grads = np.asarray(grads, dtype=np.float64)
        if self._m is None:
            self._m = np.zeros_like(net.theta)
            self._v = np.zeros_like(net.theta)
        self._t += 1
        self._m = self.beta1 * self._m + (1 - self.beta1) * grads
        self._v = self.beta2 * self._v + (1 - self.beta2) * grads * grads
        m_hat = self._m / (1 - self.beta1 ** self._t)
        v_hat = self._v / (1 - self.beta2 ** self._t)
        return sgd_step(net, m_hat / (np.sqrt(v_hat) + self.eps), self.lr)


def make_optimizer(name, lr, momentum=0.0):
    if name == "sgd":
        return SGD(lr, momentum)
    if name == "adam":
        return Adam(lr)
    raise ParameterError(f"unknown optimizer {name!r}")


# -------------------------------------------------------------- checkpoints

def checkpoint_bytes(net: ScoreNet) -> bytes:
    cfg = net.config
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, net.theta.size,
                          cfg.input_dim, int(cfg.time_conditional))
    return header + net.theta.astype("<f8").tobytes()


def parse_checkpoint(raw: bytes):
    """Return (theta, input_dim, time_conditional) from checkpoint bytes."""
    if len(raw) < _HEADER.size:
        raise CheckpointError("checkpoint truncated")
    magic, version, count, input_dim, tc = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    body = raw[_HEADER.size:]
    if len(body) != 8 * count:
        raise CheckpointError(f"expected {count} parameters, found {len(body) / 8:g}")
    theta = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return theta, input_dim, bool(tc)


def save_checkpoint(net: ScoreNet, path, metadata=None):
    """Write the binary checkpoint, plus a JSON sidecar when metadata is given."""
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(net))
    if metadata is not None:
        meta = {"config": asdict(net.config), **metadata}
        with open(str(path) + ".json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")


def load_checkpoint(path, config: MlpConfig, sde=None) -> ScoreNet:
    with open(path, "rb") as fh:
        theta, input_dim, tc = parse_checkpoint(fh.read())
    if input_dim != config.input_dim or tc != config.time_conditional or theta.size != config.param_count():
        raise CheckpointError(
            f"checkpoint (dim={input_dim}, time_conditional={tc}, params={theta.size}) "
            f"does not match config (dim={config.input_dim}, "
            f"time_conditional={config.time_conditional}, params={config.param_count()})")
    return ScoreNet(config, theta, sde)
