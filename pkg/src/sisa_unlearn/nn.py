"""Minimal differentiable model core.

Two reference architectures (a small CNN for CHW images, an MLP for flat
vectors), softmax cross-entropy with hand-written backprop, Adam, and
seeded He initialization. Everything is plain numpy so that training is
bitwise deterministic given (seed, data, hyperparameters); a float64 mode
exists for gradient verification.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidLabelError, NumericFault
from .rng import RngState

MLP = "mlp"
CNN = "cnn"


@dataclass(frozen=True)
class Architecture:
    """Structural description that fully determines every tensor shape.

    mlp: dense(hidden[0]) -> relu -> ... -> dense(n_out)
    cnn: per conv channel width: conv 3x3 pad 1 -> relu -> maxpool 2x2,
         then flatten and the dense chain as in mlp.
    """

    kind: str
    input_shape: tuple[int, ...]
    conv_channels: tuple[int, ...] = ()
    hidden: tuple[int, ...] = (64,)

    def __post_init__(self):
        if self.kind not in (MLP, CNN):
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if self.kind == MLP and len(self.input_shape) != 1:
            raise ValueError("mlp expects a flat (features,) input shape")
        if self.kind == CNN:
            if len(self.input_shape) != 3:
                raise ValueError("cnn expects a (channels, height, width) input shape")
            h, w = self.input_shape[1], self.input_shape[2]
            for _ in self.conv_channels:
                if h % 2 or w % 2:
                    raise ValueError("spatial dims must stay even through every maxpool")
                h, w = h // 2, w // 2

    def flat_dim(self) -> int:
        """Width of the flattened activation entering the dense chain."""
        if self.kind == MLP:
            return self.input_shape[0]
        c, h, w = self.input_shape
        for _ in self.conv_channels:
            h, w = h // 2, w // 2
        channels = self.conv_channels[-1] if self.conv_channels else c
        return channels * h * w

    def tensor_shapes(self, n_out: int) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        c_in = self.input_shape[0] if self.kind == CNN else None
        for i, c_out in enumerate(self.conv_channels):
            shapes[f"conv{i}.w"] = (c_out, c_in, 3, 3)
            shapes[f"conv{i}.b"] = (c_out,)
            c_in = c_out
        dims = [self.flat_dim(), *self.hidden, n_out]
        for i in range(len(dims) - 1):
            shapes[f"dense{i}.w"] = (dims[i], dims[i + 1])
            shapes[f"dense{i}.b"] = (dims[i + 1],)
        return shapes

    def to_dict(self) -> dict:
        return {"kind": self.kind, "input_shape": list(self.input_shape),
                "conv_channels": list(self.conv_channels), "hidden": list(self.hidden)}

    @classmethod
    def from_dict(cls, doc: dict) -> "Architecture":
        return cls(kind=doc["kind"], input_shape=tuple(doc["input_shape"]),
                   conv_channels=tuple(doc["conv_channels"]), hidden=tuple(doc["hidden"]))


def mlp_architecture(num_features: int, hidden: tuple[int, ...] = (64,)) -> Architecture:
    return Architecture(kind=MLP, input_shape=(num_features,), hidden=hidden)


def cnn_architecture(input_shape: tuple[int, int, int] = (3, 32, 32),
                     conv_channels: tuple[int, ...] = (16, 32),
                     hidden: tuple[int, ...] = (128,)) -> Architecture:
    return Architecture(kind=CNN, input_shape=input_shape,
                        conv_channels=conv_channels, hidden=hidden)


@dataclass
class ModelParameters:
    """Named parameter tensors for one model plus its global class map."""

    arch: Architecture
    output_classes: tuple[int, ...]     # global class id per output unit
    tensors: dict[str, np.ndarray]

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    @property
    def n_out(self) -> int:
        return len(self.output_classes)

    def param_count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def copy(self) -> "ModelParameters":
        return ModelParameters(self.arch, tuple(self.output_classes),
                               {k: v.copy() for k, v in self.tensors.items()})

    def local_index(self) -> dict[int, int]:
        return {c: i for i, c in enumerate(self.output_classes)}


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class OptimizerState:
    """Adam moments mirroring the parameter tensors, plus the step counter."""

    config: AdamConfig
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.config, self.step,
                              {k: x.copy() for k, x in self.m.items()},
                              {k: x.copy() for k, x in self.v.items()})


def init_params(arch: Architecture, output_classes, rng: RngState,
                dtype=np.float32) -> ModelParameters:
    """He fan-in initialization: w ~ N(0, 2/fan_in), biases zero."""
    output_classes = tuple(int(c) for c in output_classes)
    if not output_classes:
        raise ValueError("output_classes must be nonempty")
    g = rng.generator()
    tensors: dict[str, np.ndarray] = {}
    for name, shape in arch.tensor_shapes(len(output_classes)).items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
            w = g.standard_normal(shape, dtype=np.float64) * np.sqrt(2.0 / fan_in)
            tensors[name] = w.astype(dtype)
    return ModelParameters(arch=arch, output_classes=output_classes, tensors=tensors)


def adam_init(params: ModelParameters, config: AdamConfig | None = None) -> OptimizerState:
    config = config or AdamConfig()
    zeros = lambda: {k: np.zeros_like(t) for k, t in params.tensors.items()}
    return OptimizerState(config=config, step=0, m=zeros(), v=zeros())


def adam_step(params: ModelParameters, grads: dict[str, np.ndarray],
              state: OptimizerState) -> tuple[ModelParameters, OptimizerState]:
    """Standard Adam update with bias correction, applied in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericFault(f"non-finite gradient in tensor {name!r}")
    cfg = state.config
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * np.square(g)
        update = (cfg.lr * (m / c1)) / (np.sqrt(v / c2) + cfg.eps)
        params.tensors[name] -= update.astype(params.tensors[name].dtype, copy=False)
    return params, state


# --- forward / backward -----------------------------------------------------

def _layer_sequence(arch: Architecture) -> list[tuple[str, str | None]]:
    layers: list[tuple[str, str | None]] = []
    for i in range(len(arch.conv_channels)):
        layers += [("conv", f"conv{i}"), ("relu", None), ("pool", None)]
    if arch.kind == CNN:
        layers.append(("flatten", None))
    n_dense = len(arch.hidden) + 1
    for i in range(n_dense):
        layers.append(("dense", f"dense{i}"))
        if i < n_dense - 1:
            layers.append(("relu", None))
    return layers


def _conv_forward(x, w, b):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    cols = np.empty((n, c, kh, kw, h, wd), dtype=x.dtype)
    for di in range(kh):
        for dj in range(kw):
            cols[:, :, di, dj] = xp[:, :, di:di + h, dj:dj + wd]
    cols = cols.reshape(n, c * kh * kw, h * wd)
    out = np.matmul(w.reshape(o, -1), cols)          # (n, o, h*wd)
    out += b[:, None]
    return out.reshape(n, o, h, wd), (x.shape, cols)


def _conv_backward(dy, w, cache):
    x_shape, cols = cache
    n, c, h, wd = x_shape
    o, _, kh, kw = w.shape
    dy2 = dy.reshape(n, o, h * wd)
    dw = np.tensordot(dy2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
    db = dy2.sum(axis=(0, 2))
    dcols = np.matmul(w.reshape(o, -1).T, dy2)       # (n, c*kh*kw, h*wd)
    dcols = dcols.reshape(n, c, kh, kw, h, wd)
    dxp = np.zeros((n, c, h + kh - 1, wd + kw - 1), dtype=dy.dtype)
    for di in range(kh):
        for dj in range(kw):
            dxp[:, :, di:di + h, dj:dj + wd] += dcols[:, :, di, dj]
    ph, pw = kh // 2, kw // 2
    return dxp[:, :, ph:ph + h, pw:pw + wd], dw, db


def _pool_forward(x):
    n, c, h, w = x.shape
    xr = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = xr.reshape(n, c, h // 2, w // 2, 4)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg)


def _pool_backward(dy, cache):
    x_shape, arg = cache
    n, c, h, w = x_shape
    dwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=dy.dtype)
    np.put_along_axis(dwin, arg[..., None], dy[..., None], axis=-1)
    dx = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return dx.reshape(n, c, h, w)


def _run_forward(params: ModelParameters, x: np.ndarray, keep_cache: bool):
    arch = params.arch
    if x.shape[1:] != arch.input_shape:
        raise ValueError(
            f"input shape {tuple(x.shape[1:])} does not match architecture "
            f"input {arch.input_shape}"
        )
    a = x.astype(params.dtype, copy=False)
    caches = []
    for kind, name in _layer_sequence(arch):
        if kind == "conv":
            a, cache = _conv_forward(a, params.tensors[f"{name}.w"], params.tensors[f"{name}.b"])
            caches.append((kind, name, cache))
        elif kind == "pool":
            a, cache = _pool_forward(a)
            caches.append((kind, name, cache))
        elif kind == "relu":
            mask = a > 0
            a = a * mask
            caches.append((kind, name, mask))
        elif kind == "flatten":
            caches.append((kind, name, a.shape))
            a = a.reshape(a.shape[0], -1)
        else:  # dense
            caches.append((kind, name, a))
            a = a @ params.tensors[f"{name}.w"] + params.tensors[f"{name}.b"]
    return a, (caches if keep_cache else None)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    s = z - z.max(axis=1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def log_probs(params: ModelParameters, x: np.ndarray) -> np.ndarray:
    logits, _ = _run_forward(params, x, keep_cache=False)
    return _log_softmax(logits)


def forward(params: ModelParameters, x: np.ndarray) -> np.ndarray:
    """Class probabilities, one simplex row per input."""
    return np.exp(log_probs(params, x))


def forward_batched(params: ModelParameters, x: np.ndarray,
                    batch_size: int = 512) -> np.ndarray:
    """forward() in chunks; bounds conv im2col memory on large inputs."""
    if len(x) <= batch_size:
        return forward(params, x)
    out = np.empty((len(x), params.n_out), dtype=params.dtype)
    for start in range(0, len(x), batch_size):
        out[start:start + batch_size] = forward(params, x[start:start + batch_size])
    return out


def _check_labels(params: ModelParameters, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= params.n_out):
        raise InvalidLabelError(
            f"label outside model head of width {params.n_out} "
            "(check the partition metadata)"
        )
    return y


def loss_and_grad(params: ModelParameters, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy over the batch and gradients for every tensor."""
    y = _check_labels(params, y)
    logits, caches = _run_forward(params, x, keep_cache=True)
    logp = _log_softmax(logits)
    n = x.shape[0]
    loss = float(-logp[np.arange(n), y].mean())

    grads: dict[str, np.ndarray] = {}
    da = np.exp(logp)
    da[np.arange(n), y] -= 1.0
    da /= n
    for kind, name, cache in reversed(caches):
        if kind == "dense":
            w = params.tensors[f"{name}.w"]
            grads[f"{name}.w"] = cache.T @ da
            grads[f"{name}.b"] = da.sum(axis=0)
            da = da @ w.T
        elif kind == "relu":
            da = da * cache
        elif kind == "flatten":
            da = da.reshape(cache)
        elif kind == "pool":
            da = _pool_backward(da, cache)
        else:  # conv
            w = params.tensors[f"{name}.w"]
            da, dw, db = _conv_backward(da, w, cache)
            grads[f"{name}.w"] = dw
            grads[f"{name}.b"] = db
    return loss, grads


def mean_loss(params: ModelParameters, x: np.ndarray, y: np.ndarray,
              batch_size: int = 1024) -> float:
    """Cross-entropy without gradients, evaluated in chunks."""
    y = _check_labels(params, y)
    total = 0.0
    for start in range(0, len(x), batch_size):
        xb = x[start:start + batch_size]
        yb = y[start:start + batch_size]
        logp = log_probs(params, xb)
        total += float(-logp[np.arange(len(xb)), yb].sum())
    return total / len(x)


def predict_local(params: ModelParameters, x: np.ndarray,
                  batch_size: int = 1024) -> np.ndarray:
    """Argmax over the local head, evaluated in chunks."""
    out = np.empty(len(x), dtype=np.int64)
    for start in range(0, len(x), batch_size):
        logits, _ = _run_forward(params, x[start:start + batch_size], keep_cache=False)
        out[start:start + len(logits)] = logits.argmax(axis=1)
    return out


def predict_global(params: ModelParameters, x: np.ndarray,
                   batch_size: int = 1024) -> np.ndarray:
    local = predict_local(params, x, batch_size)
    lut = np.asarray(params.output_classes, dtype=np.int64)
    return lut[local]


def drop_output_classes(params: ModelParameters, state: OptimizerState | None,
                        remove) -> tuple[ModelParameters, OptimizerState | None]:
    """Rebuild the output layer without the given global classes.

    The removed classes' weight columns, biases, and optimizer moments are
    deleted outright (not masked), so no parameter tied to them survives.
    """
    remove = set(int(c) for c in remove)
    keep = [i for i, c in enumerate(params.output_classes) if c not in remove]
    if len(keep) == len(params.output_classes):
        return params.copy(), state.copy() if state else None
    if not keep:
        raise ValueError("cannot drop every output class")
    head = f"dense{len(params.arch.hidden)}"
    new_params = params.copy()
    new_params.output_classes = tuple(params.output_classes[i] for i in keep)
    new_params.tensors[f"{head}.w"] = new_params.tensors[f"{head}.w"][:, keep].copy()
    new_params.tensors[f"{head}.b"] = new_params.tensors[f"{head}.b"][keep].copy()
    new_state = None
    if state is not None:
        new_state = state.copy()
        for moments in (new_state.m, new_state.v):
            moments[f"{head}.w"] = moments[f"{head}.w"][:, keep].copy()
            moments[f"{head}.b"] = moments[f"{head}.b"][keep].copy()
    return new_params, new_state
