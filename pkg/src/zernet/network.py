"""Single-scale Zernike convolutional networks with hand-written backprop.

Each convolution block decomposes its per-vertex input over fixed geodesic
patches (a precomputed sparse linear operator), convolves the coefficients
with a rotated kernel bank and max-pools over rotations unless the
direction axis is carried into the next directional block.
"""

from dataclasses import asdict, dataclass, field
import logging

import numpy as np

from .conv import KernelBank, ZerConvOp
from .errors import ConfigError, DivergenceError, DomainError, ShapeError, StateError

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# layer descriptors


@dataclass(frozen=True)
class ZerConv:
    d_out: int
    r0: float
    k: int = 21
    s: int = 4
    directional: bool = False


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Linear:
    d_out: int


@dataclass(frozen=True)
class Softmax:
    pass


LAYER_TYPES = {"ZerConv": ZerConv, "ReLU": ReLU, "Linear": Linear, "Softmax": Softmax}
LOSSES = ("cross_entropy", "mse")


def layer_to_dict(layer):
    return {"type": type(layer).__name__, **asdict(layer)}


def layer_from_dict(d):
    d = dict(d)
    try:
        cls = LAYER_TYPES[d.pop("type")]
    except KeyError as exc:
        raise ConfigError(f"unknown layer type {exc}") from None
    return cls(**d)


@dataclass(frozen=True)
class ModelSpec:
    """Layer list plus loss, input width and initialization seed."""

    layers: tuple
    in_channels: int = 3
    loss: str = "cross_entropy"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}")
        if not any(isinstance(l, ZerConv) for l in self.layers):
            raise ConfigError("model needs at least one ZerConv layer")
        for l in self.layers:
            if not isinstance(l, tuple(LAYER_TYPES.values())):
                raise ConfigError(f"unsupported layer {l!r}")
        if self.loss == "cross_entropy" and not isinstance(self.layers[-1], Softmax):
            raise ConfigError("cross_entropy loss needs a final Softmax layer")

    @property
    def out_channels(self):
        width = self.in_channels
        for l in self.layers:
            if isinstance(l, (ZerConv, Linear)):
                width = l.d_out
        return width

    @property
    def patch_keys(self):
        """Distinct ``(r0, k)`` pairs needing decomposition operators."""
        return sorted({(l.r0, l.k) for l in self.layers if isinstance(l, ZerConv)})

    def to_dict(self):
        return {"layers": [layer_to_dict(l) for l in self.layers],
                "in_channels": self.in_channels, "loss": self.loss, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(layer_from_dict(l) for l in d["layers"]),
                   d.get("in_channels", 3), d.get("loss", "cross_entropy"), d.get("seed", 0))


def parse_architecture(text, r0, k=21, s=4, directional=False):
    """Parse ``"conv16,conv32,lin64,lin8,softmax"``-style layer strings.

    ReLU is inserted after each conv and after every hidden linear layer.
    """
    names = [t.strip().lower() for t in text.split(",") if t.strip()]
    layers = []
    for i, name in enumerate(names):
        last_weight = all(not n.startswith(("conv", "lin")) for n in names[i + 1:])
        if name.startswith("conv"):
            layers.append(ZerConv(int(name[4:]), r0, k, s, directional))
            layers.append(ReLU())
        elif name.startswith("lin"):
            layers.append(Linear(int(name[3:])))
            if not last_weight:
                layers.append(ReLU())
        elif name == "softmax":
            layers.append(Softmax())
        elif name == "relu":
            layers.append(ReLU())
        else:
            raise ConfigError(f"unknown layer token {name!r}")
    return tuple(layers)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 100
    checkpoint_interval: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError("learning rate must be non-negative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("Adam betas must lie in (0, 1)")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")


# ---------------------------------------------------------------------------
# runtime data


@dataclass(eq=False)
class PreparedMesh:
    """One training/evaluation example.

    ``operators`` maps ``(r0, k)`` to a :class:`DecompositionOperator`.
    ``target`` holds integer labels (classification) or an ``(N, c)``
    array (regression).
    """

    x: np.ndarray
    operators: dict
    target: np.ndarray = None
    name: str = ""

    @property
    def n_vertices(self):
        return len(self.x)

    def operator(self, r0, k):
        try:
            return self.operators[(r0, k)]
        except KeyError:
            raise StateError(f"no precomputed patches for r0={r0}, k={k}") from None


# ---------------------------------------------------------------------------
# runtime layers


class _ConvModule:
    def __init__(self, desc, d_in, directional_in, keep_direction, rng):
        self.desc = desc
        self.directional_in = directional_in
        self.keep_direction = keep_direction
        bound = 1.0 / np.sqrt(desc.k * d_in)
        base = rng.uniform(-bound, bound, size=(desc.k, d_in, desc.d_out))
        self.kernel = KernelBank(base, desc.s)
        self.op = ZerConvOp(self.kernel, directional_input=directional_in, pool=not keep_direction)
        self._operator = None

    def params(self):
        return {"base": self.kernel.base, "bias": self.kernel.bias}

    def grads(self):
        return {"base": self.op.grad_base, "bias": self.op.grad_bias}

    def forward(self, x, data):
        D = data.operator(self.desc.r0, self.desc.k)
        self._operator = D
        F = D.apply(x)  # (N, k, d) or (N, k, s, d)
        if self.directional_in:
            F = np.moveaxis(F, 2, 1)
        return self.op.forward(F)

    def backward(self, grad):
        grad_F = self.op.backward(grad)
        if self.directional_in:
            grad_F = np.moveaxis(grad_F, 1, 2)
        return self._operator.apply_transpose(grad_F)


class _LinearModule:
    def __init__(self, d_in, d_out, rng):
        bound = 1.0 / np.sqrt(d_in)
        self.weight = rng.uniform(-bound, bound, size=(d_in, d_out))
        self.bias = np.zeros(d_out)
        self._x = None
        self.grad_weight = self.grad_bias = None

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def grads(self):
        return {"weight": self.grad_weight, "bias": self.grad_bias}

    def forward(self, x, data=None):
        self._x = x
        return x @ self.weight + self.bias

    def backward(self, grad):
        if self._x is None:
            raise StateError("backward called before forward")
        x2 = self._x.reshape(-1, self._x.shape[-1])
        g2 = grad.reshape(-1, grad.shape[-1])
        self.grad_weight = x2.T @ g2
        self.grad_bias = g2.sum(0)
        return grad @ self.weight.T


class _ReLUModule:
    def __init__(self):
        self._mask = None

    def params(self):
        return {}

    def grads(self):
        return {}

    def forward(self, x, data=None):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad):
        if self._mask is None:
            raise StateError("backward called before forward")
        return np.where(self._mask, grad, 0.0)


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class _SoftmaxModule:
    def __init__(self):
        self._p = None

    def params(self):
        return {}

    def grads(self):
        return {}

    def forward(self, x, data=None):
        self._p = softmax(x)
        return self._p

    def backward(self, grad):
        if self._p is None:
            raise StateError("backward called before forward")
        p = self._p
        return p * (grad - (grad * p).sum(axis=-1, keepdims=True))


class Network:
    """Trainable model instantiated from a :class:`ModelSpec`."""

    def __init__(self, spec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        self.modules = []
        width = spec.in_channels
        directional = False
        for i, desc in enumerate(spec.layers):
            if isinstance(desc, ZerConv):
                nxt = next((spec.layers[j] for j in range(i + 1, len(spec.layers))
                            if not isinstance(spec.layers[j], ReLU)), None)
                keep = desc.directional and isinstance(nxt, ZerConv) and nxt.directional
                self.modules.append(_ConvModule(desc, width, directional, keep, rng))
                directional = keep
                width = desc.d_out
            elif isinstance(desc, Linear):
                if directional:
                    raise ConfigError("Linear layer cannot consume a direction axis")
                self.modules.append(_LinearModule(width, desc.d_out, rng))
                width = desc.d_out
            elif isinstance(desc, ReLU):
                self.modules.append(_ReLUModule())
            else:
                self.modules.append(_SoftmaxModule())

    def parameters(self):
        """Ordered ``name -> array`` views of all trainable tensors."""
        out = {}
        for i, m in enumerate(self.modules):
            for name, value in m.params().items():
                out[f"{i}.{name}"] = value
        return out

    def gradients(self):
        out = {}
        for i, m in enumerate(self.modules):
            for name, value in m.grads().items():
                out[f"{i}.{name}"] = value
        return out

    def load_parameters(self, params):
        current = self.parameters()
        if set(params) != set(current):
            raise ShapeError("checkpoint parameter names do not match the model")
        for name, value in params.items():
            if np.shape(value) != current[name].shape:
                raise ShapeError(
                    f"parameter {name}: checkpoint shape {np.shape(value)} != model {current[name].shape}")
            current[name][...] = value

    def forward(self, data, logits=False):
        """Per-vertex outputs; with ``logits`` the final Softmax is skipped."""
        x = np.asarray(data.x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"input has shape {x.shape}, model expects (N, {self.spec.in_channels})")
        if not np.isfinite(x).all():
            raise DomainError("input features contain NaN or Inf")
        mods = self.modules
        if logits and isinstance(mods[-1], _SoftmaxModule):
            mods = mods[:-1]
        for m in mods:
            x = m.forward(x, data)
        return x

    def backward(self, grad, skip_softmax=False):
        mods = self.modules
        if skip_softmax and isinstance(mods[-1], _SoftmaxModule):
            mods = mods[:-1]
        for m in reversed(mods):
            grad = m.backward(grad)
        return grad

    def loss_and_grad(self, data):
        """Loss on one mesh; gradients are left on the modules."""
        if self.spec.loss == "cross_entropy":
            z = self.forward(data, logits=True)
            labels = np.asarray(data.target, dtype=np.int64).ravel()
            if labels.shape[0] != z.shape[0]:
                raise ShapeError("one label per vertex required")
            p = softmax(z)
            n = len(labels)
            loss = -np.mean(np.log(np.maximum(p[np.arange(n), labels], 1e-300)))
            g = p.copy()
            g[np.arange(n), labels] -= 1.0
            self.backward(g / n, skip_softmax=True)
        else:
            y = self.forward(data)
            t = np.asarray(data.target, dtype=float).reshape(y.shape)
            diff = y - t
            loss = np.mean(diff ** 2)
            self.backward(2.0 * diff / diff.size)
        return float(loss)

    def loss(self, data):
        if self.spec.loss == "cross_entropy":
            z = self.forward(data, logits=True)
            labels = np.asarray(data.target, dtype=np.int64).ravel()
            p = softmax(z)
            return float(-np.mean(np.log(np.maximum(p[np.arange(len(labels)), labels], 1e-300))))
        y = self.forward(data)
        return float(np.mean((y - np.asarray(data.target, dtype=float).reshape(y.shape)) ** 2))

    def predict(self, data):
        """Class ids (classification) or values (regression) per vertex."""
        y = self.forward(data)
        return y.argmax(axis=1) if self.spec.loss == "cross_entropy" else y


def forward(model, data):
    return model.forward(data)


# ---------------------------------------------------------------------------
# optimization


class Adam:
    """Adam with bias-corrected moment estimates; updates parameters in place."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v = {}, {}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class TrainResult:
    model: Network
    history: list = field(default_factory=list)  # (epoch, loss, metric)


def _epoch_metric(model, dataset):
    if model.spec.loss == "cross_entropy":
        hits = total = 0
        for data in dataset:
            pred = model.predict(data)
            hits += int((pred == np.asarray(data.target).ravel()).sum())
            total += len(pred)
        return hits / total
    num = den = 0.0
    for data in dataset:
        y = model.predict(data)
        t = np.asarray(data.target, dtype=float).reshape(y.shape)
        num += float(((y - t) ** 2).sum())
        den += float((t ** 2).sum())
    return float(np.sqrt(num / den)) if den > 0 else float("nan")


def train(model_spec, config, dataset, checkpoint=None, model=None):
    """Full-mesh Adam training.

    Parameters
    ----------
    model_spec : ModelSpec
    config : TrainConfig
    dataset : sequence of PreparedMesh
    checkpoint : callable(model, epoch), optional
        Called every ``config.checkpoint_interval`` epochs.
    model : Network, optional
        Continue training an existing model instead of initializing one.

    Returns
    -------
    TrainResult
        ``history`` rows are ``(epoch, mean loss, metric)`` where the
        metric is training accuracy or relative RMSE, measured after the
        epoch's updates.
    """
    if not dataset:
        raise ConfigError("training dataset is empty")
    model = model or Network(model_spec)
    opt = Adam(config.lr, config.beta1, config.beta2, config.eps)
    result = TrainResult(model)
    for epoch in range(1, config.epochs + 1):
        losses = []
        for data in dataset:
            loss = model.loss_and_grad(data)
            if not np.isfinite(loss):
                raise DivergenceError(f"loss became {loss} at epoch {epoch} on {data.name or 'mesh'}")
            opt.step(model.parameters(), model.gradients())
            losses.append(loss)
        metric = _epoch_metric(model, dataset)
        result.history.append((epoch, float(np.mean(losses)), metric))
        log.info("epoch %d loss %.6g metric %.4f", epoch, np.mean(losses), metric)
        if checkpoint and config.checkpoint_interval and epoch % config.checkpoint_interval == 0:
            checkpoint(model, epoch)
    return result
