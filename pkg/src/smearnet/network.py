"""Layer-graph description, execution, and training of the SqueezeNet-style classifier."""
import copy
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor_ops as ops
from .tensor_ops import BatchNormParams, ConvParams, ShapeError

LAYER_KINDS = ("conv", "maxpool", "fire", "batchnorm", "flatten", "dense", "relu", "softmax")


class ConfigError(ValueError):
    """A network configuration fails the static shape check."""


class UnknownLayerError(ValueError):
    pass


@dataclass
class LayerSpec:
    kind: str
    name: str = None
    in_channels: int = None
    out_channels: int = None
    kernel: int = None
    stride: int = None
    padding: int = None
    squeeze: int = None
    expand1x1: int = None
    expand3x3: int = None
    in_features: int = None
    out_features: int = None

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)
                if getattr(self, f.name) is not None}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown layer fields {sorted(unknown)}")
        return cls(**d)


@dataclass
class NetworkConfig:
    input: tuple  # (channels, height, width)
    layers: list
    class_count: int = 2

    def to_dict(self):
        return {"input": list(self.input), "layers": [l.to_dict() for l in self.layers],
                "class_count": self.class_count}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["input"]), [LayerSpec.from_dict(l) for l in d["layers"]],
                   d.get("class_count", 2))

    def layer_names(self):
        return [layer_name(spec, i) for i, spec in enumerate(self.layers)]

    def shapes(self):
        """Statically propagate per-sample shapes; returns the output shape of every layer.

        Raises ConfigError on any declared/actual mismatch.
        """
        if self.class_count != 2:
            raise ConfigError("only two-class heads are supported")
        shape = tuple(self.input)
        if len(shape) != 3 or min(shape) < 1:
            raise ConfigError(f"input must be (channels, height, width), got {self.input}")
        names = self.layer_names()
        if len(set(names)) != len(names):
            raise ConfigError("layer names must be unique")
        out = []
        for i, spec in enumerate(self.layers):
            where = f"layer {i} ({names[i]})"
            k = spec.kind
            if k not in LAYER_KINDS:
                raise ConfigError(f"{where}: unknown kind {k!r}")
            if k in ("conv", "maxpool", "fire", "batchnorm") and len(shape) != 3:
                raise ConfigError(f"{where}: expects a C,H,W input, got {shape}")
            if k == "conv":
                if spec.in_channels != shape[0]:
                    raise ConfigError(
                        f"{where}: declares {spec.in_channels} input channels, predecessor gives {shape[0]}")
                kk, s, p = spec.kernel, spec.stride or 1, spec.padding or 0
                h, w = shape[1] + 2 * p - kk, shape[2] + 2 * p - kk
                if h < 0 or w < 0:
                    raise ConfigError(f"{where}: kernel {kk} larger than padded input")
                shape = (spec.out_channels, h // s + 1, w // s + 1)
            elif k == "maxpool":
                s = spec.stride or 1
                if shape[1] < 3 or shape[2] < 3:
                    raise ConfigError(f"{where}: input {shape[1]}x{shape[2]} smaller than 3x3 window")
                shape = (shape[0], (shape[1] - 3) // s + 1, (shape[2] - 3) // s + 1)
            elif k == "fire":
                if spec.in_channels != shape[0]:
                    raise ConfigError(
                        f"{where}: declares {spec.in_channels} input channels, predecessor gives {shape[0]}")
                shape = (spec.expand1x1 + spec.expand3x3, shape[1], shape[2])
            elif k == "batchnorm":
                if spec.in_channels != shape[0]:
                    raise ConfigError(
                        f"{where}: declares {spec.in_channels} channels, predecessor gives {shape[0]}")
            elif k == "flatten":
                shape = (math.prod(shape),)
            elif k == "dense":
                if len(shape) != 1:
                    raise ConfigError(f"{where}: dense needs a flattened input, got {shape}")
                if spec.in_features != shape[0]:
                    raise ConfigError(
                        f"{where}: declares {spec.in_features} input features, predecessor gives {shape[0]}")
                shape = (spec.out_features,)
            elif k == "softmax":
                if i != len(self.layers) - 1:
                    raise ConfigError(f"{where}: softmax must be the final layer")
                if shape != (self.class_count,):
                    raise ConfigError(f"{where}: softmax over {shape}, expected ({self.class_count},)")
            out.append(shape)
        if not self.layers or self.layers[-1].kind != "softmax":
            raise ConfigError("the final layer must be softmax")
        return out


def layer_name(spec, index):
    return spec.name or f"{spec.kind}{index}"


def default_config(size=20, channels=3):
    """The default classifier for ``size`` x ``size`` patches.

    conv3x3(32) -> relu -> maxpool/2 -> fire(16, 64+64) x2 -> maxpool/2
    -> batchnorm -> flatten -> dense(56) -> relu -> dense(2) -> softmax.
    The same layer list serves every patch size; only the flatten width changes.
    """
    def pooled(d):
        return (d - 3) // 2 + 1

    spatial = pooled(pooled(size))
    layers = [
        LayerSpec("conv", "conv1", in_channels=channels, out_channels=32, kernel=3, stride=1, padding=1),
        LayerSpec("relu", "relu1"),
        LayerSpec("maxpool", "pool1", stride=2),
        LayerSpec("fire", "fire2", in_channels=32, squeeze=16, expand1x1=64, expand3x3=64),
        LayerSpec("fire", "fire3", in_channels=128, squeeze=16, expand1x1=64, expand3x3=64),
        LayerSpec("maxpool", "pool3", stride=2),
        LayerSpec("batchnorm", "bn", in_channels=128),
        LayerSpec("flatten", "flatten"),
        LayerSpec("dense", "fc1", in_features=128 * spatial * spatial, out_features=56),
        LayerSpec("relu", "relu_fc1"),
        LayerSpec("dense", "fc2", in_features=56, out_features=2),
        LayerSpec("softmax", "softmax"),
    ]
    return NetworkConfig((channels, size, size), layers)


def parameter_shapes(config):
    """Ordered mapping of parameter name to shape, in layer order."""
    config.shapes()
    shapes = {}
    for i, spec in enumerate(config.layers):
        name = layer_name(spec, i)
        if spec.kind == "conv":
            k = spec.kernel
            shapes[f"{name}.weight"] = (spec.out_channels, spec.in_channels, k, k)
            shapes[f"{name}.bias"] = (spec.out_channels,)
        elif spec.kind == "fire":
            sq = spec.squeeze
            shapes[f"{name}.squeeze.weight"] = (sq, spec.in_channels, 1, 1)
            shapes[f"{name}.squeeze.bias"] = (sq,)
            shapes[f"{name}.expand1x1.weight"] = (spec.expand1x1, sq, 1, 1)
            shapes[f"{name}.expand1x1.bias"] = (spec.expand1x1,)
            shapes[f"{name}.expand3x3.weight"] = (spec.expand3x3, sq, 3, 3)
            shapes[f"{name}.expand3x3.bias"] = (spec.expand3x3,)
        elif spec.kind == "batchnorm":
            c = spec.in_channels
            for suffix in ("gamma", "beta", "running_mean", "running_var"):
                shapes[f"{name}.{suffix}"] = (c,)
        elif spec.kind == "dense":
            shapes[f"{name}.weight"] = (spec.out_features, spec.in_features)
            shapes[f"{name}.bias"] = (spec.out_features,)
    return shapes


# Parameters that hold statistics rather than learnable values.
BUFFER_SUFFIXES = (".running_mean", ".running_var")


def is_trainable(name):
    return not name.endswith(BUFFER_SUFFIXES)


@dataclass
class ModelState:
    config: NetworkConfig
    params: dict
    meta: dict = field(default_factory=lambda: {"epochs": 0, "seed": None})

    def copy(self):
        return ModelState(self.config, {k: v.copy() for k, v in self.params.items()},
                          copy.deepcopy(self.meta))

    def parameter_bytes(self):
        return sum(v.size * 4 for v in self.params.values())


def init_model(config, seed=0):
    """He-uniform initialisation for conv/dense weights; zero biases; gamma 1, beta 0."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".weight"):
            fan_in = math.prod(shape[1:])
            limit = math.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
        elif name.endswith((".gamma", ".running_var")):
            params[name] = np.ones(shape, np.float32)
        else:
            params[name] = np.zeros(shape, np.float32)
    return ModelState(config, params, {"epochs": 0, "seed": seed})


def _conv(params, prefix, stride=1, padding=0):
    return ConvParams(params[f"{prefix}.weight"], params[f"{prefix}.bias"], stride, padding)


def _bn(params, prefix):
    return BatchNormParams(params[f"{prefix}.gamma"], params[f"{prefix}.beta"],
                           params[f"{prefix}.running_mean"], params[f"{prefix}.running_var"])


def fire_forward(x, squeeze, expand1, expand3):
    """Squeeze 1x1 -> ReLU, then ReLU(expand 1x1) and ReLU(expand 3x3) concatenated on channels."""
    if expand1.weights.shape[1] != squeeze.weights.shape[0] or \
            expand3.weights.shape[1] != squeeze.weights.shape[0]:
        raise ShapeError("expand branches must consume the squeeze output channels")
    s = ops.relu(ops.conv2d_forward(x, squeeze))
    e1 = ops.relu(ops.conv2d_forward(s, expand1))
    e3 = ops.relu(ops.conv2d_forward(s, expand3))
    return np.concatenate([e1, e3], axis=1)


def _fire_train(x, params, prefix):
    sq = _conv(params, f"{prefix}.squeeze")
    ex1 = _conv(params, f"{prefix}.expand1x1")
    ex3 = _conv(params, f"{prefix}.expand3x3", padding=1)
    s_pre = ops.conv2d_forward(x, sq)
    s = ops.relu(s_pre)
    e1_pre = ops.conv2d_forward(s, ex1)
    e3_pre = ops.conv2d_forward(s, ex3)
    out = np.concatenate([ops.relu(e1_pre), ops.relu(e3_pre)], axis=1)
    return out, (x, s_pre, s, e1_pre, e3_pre, sq, ex1, ex3)


def _fire_backward(cache, grad_out, prefix, grads):
    x, s_pre, s, e1_pre, e3_pre, sq, ex1, ex3 = cache
    c1 = e1_pre.shape[1]
    g1 = ops.relu_backward(e1_pre, grad_out[:, :c1])
    g3 = ops.relu_backward(e3_pre, grad_out[:, c1:])
    gs1, grads[f"{prefix}.expand1x1.weight"], grads[f"{prefix}.expand1x1.bias"] = \
        ops.conv2d_backward(s, ex1, g1)
    gs3, grads[f"{prefix}.expand3x3.weight"], grads[f"{prefix}.expand3x3.bias"] = \
        ops.conv2d_backward(s, ex3, g3)
    gs = ops.relu_backward(s_pre, gs1 + gs3)
    gx, grads[f"{prefix}.squeeze.weight"], grads[f"{prefix}.squeeze.bias"] = \
        ops.conv2d_backward(x, sq, gs)
    return gx


def forward(model, batch, mode="infer", until=None):
    """Run the network on an N,C,H,W batch.

    Returns ``(probs, cache)``; ``cache`` is None in infer mode. With
    ``until`` set to a layer name, returns that layer's output instead of
    the class probabilities.
    """
    config, params = model.config, model.params
    if batch.ndim != 4 or tuple(batch.shape[1:]) != tuple(config.input):
        raise ShapeError(f"batch shape {batch.shape} does not match model input {tuple(config.input)}")
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if until is not None and until not in config.layer_names():
        raise UnknownLayerError(
            f"unknown layer {until!r}; valid names: {', '.join(config.layer_names())}")
    train = mode == "train"
    cache = [] if train else None
    x = batch
    for i, spec in enumerate(config.layers):
        name = layer_name(spec, i)
        k = spec.kind
        entry = None
        if k == "conv":
            p = _conv(params, name, spec.stride or 1, spec.padding or 0)
            entry = (x, p)
            x = ops.conv2d_forward(x, p)
        elif k == "relu":
            entry = x
            x = ops.relu(x)
        elif k == "maxpool":
            x, entry = ops.maxpool3x3(x, spec.stride or 1)
        elif k == "fire":
            if train:
                x, entry = _fire_train(x, params, name)
            else:
                x = fire_forward(x, _conv(params, f"{name}.squeeze"),
                                 _conv(params, f"{name}.expand1x1"),
                                 _conv(params, f"{name}.expand3x3", padding=1))
        elif k == "batchnorm":
            x, entry = ops.batchnorm_forward(x, _bn(params, name), mode)
        elif k == "flatten":
            entry = x.shape
            x = x.reshape(x.shape[0], -1)
        elif k == "dense":
            entry = x
            x = ops.dense_forward(x, params[f"{name}.weight"], params[f"{name}.bias"])
        elif k == "softmax":
            entry = x
            x = ops.softmax(x)
        if train:
            cache.append(entry)
        if until is not None and name == until:
            return x, cache
    return x, cache


def backward(model, cache, grad_logits):
    """Back-propagate the fused softmax/BCE gradient; returns a dict of parameter gradients."""
    config, params = model.config, model.params
    grads = {}
    g = grad_logits
    for i in range(len(config.layers) - 1, -1, -1):
        spec = config.layers[i]
        name = layer_name(spec, i)
        entry = cache[i]
        k = spec.kind
        if k == "softmax":
            continue  # grad_logits already includes the softmax Jacobian
        if k == "conv":
            x, p = entry
            g, grads[f"{name}.weight"], grads[f"{name}.bias"] = ops.conv2d_backward(x, p, g)
        elif k == "relu":
            g = ops.relu_backward(entry, g)
        elif k == "maxpool":
            g = ops.maxpool_backward(entry, g)
        elif k == "fire":
            g = _fire_backward(entry, g, name, grads)
        elif k == "batchnorm":
            g, grads[f"{name}.gamma"], grads[f"{name}.beta"] = ops.batchnorm_backward(entry, g)
        elif k == "flatten":
            g = g.reshape(entry)
        elif k == "dense":
            g, grads[f"{name}.weight"], grads[f"{name}.bias"] = \
                ops.dense_backward(entry, params[f"{name}.weight"], g)
    return grads


def loss_and_grads(model, batch, labels):
    """Train-mode forward + backward. Running statistics are updated in place."""
    probs, cache = forward(model, batch, "train")
    loss, grad_logits = ops.bce_loss(probs, labels)
    return loss, probs, backward(model, cache, grad_logits)


def predict_scores(model, batch, batch_size=256):
    """Positive-class probability for every sample, infer mode, scored in chunks."""
    out = np.empty(batch.shape[0], np.float32)
    for start in range(0, batch.shape[0], batch_size):
        probs, _ = forward(model, batch[start:start + batch_size], "infer")
        out[start:start + batch_size] = probs[:, 1]
    return out


@dataclass
class TrainingConfig:
    lr: float = 1e-4
    batch_size: int = 256
    epochs: int = 20
    seed: int = 42
    shuffle: bool = True

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def train(model, dataset, cfg, on_epoch=None, step_hook=None):
    """Minibatch Adam training with the fused softmax/BCE loss.

    ``dataset`` needs ``patches`` (N,C,H,W) and ``labels`` (N,). Returns a
    new ModelState and a list of per-epoch ``{"epoch", "loss", "accuracy"}``
    records; the input model is not modified. ``step_hook(model, grads)``
    may rewrite the gradient dict before each update.
    """
    X = np.asarray(dataset.patches, np.float32)
    y = np.asarray(dataset.labels).astype(np.int64)
    if X.shape[0] == 0:
        raise ValueError("cannot train on an empty dataset")
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    state = ops.AdamState(lr=cfg.lr)
    trainable = {k: v for k, v in model.params.items() if is_trainable(k)}
    log = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(X)) if cfg.shuffle else np.arange(len(X))
        total_loss, correct = 0.0, 0
        for start in range(0, len(X), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, probs, grads = loss_and_grads(model, X[idx], y[idx])
            if step_hook is not None:
                grads = step_hook(model, grads)
            ops.adam_step(trainable, grads, state)
            total_loss += loss * len(idx)
            correct += int((probs.argmax(axis=1) == y[idx]).sum())
        record = {"epoch": model.meta.get("epochs", 0) + 1,
                  "loss": total_loss / len(X), "accuracy": correct / len(X)}
        model.meta["epochs"] = record["epoch"]
        log.append(record)
        if on_epoch is not None:
            on_epoch(record)
    model.meta["seed"] = cfg.seed
    return model, log


def activation_grid(model, sample, layer):
    """Per-channel activation maps of ``layer`` for one C,H,W sample, tiled into a uint8 grid.

    Each channel is min-max scaled to [0, 255] independently; a constant
    channel maps to 0. Tiles are laid out row-major in a near-square grid.
    """
    act, _ = forward(model, sample[None].astype(np.float32), "infer", until=layer)
    act = act[0].astype(np.float64)
    if act.ndim == 1:
        act = act[:, None, None]
    c, h, w = act.shape
    lo = act.min(axis=(1, 2), keepdims=True)
    span = act.max(axis=(1, 2), keepdims=True) - lo
    scaled = np.where(span > 0, (act - lo) / np.where(span > 0, span, 1) * 255.0, 0.0)
    tiles = np.rint(scaled).astype(np.uint8)
    cols = math.ceil(math.sqrt(c))
    rows = math.ceil(c / cols)
    grid = np.zeros((rows * h, cols * w), np.uint8)
    for ch in range(c):
        r, q = divmod(ch, cols)
        grid[r * h:(r + 1) * h, q * w:(q + 1) * w] = tiles[ch]
    return grid


def dump_activations(model, sample, layer, path):
    """Write the activation grid of ``layer`` as a grayscale PGM; returns the grid."""
    from .raster import save_raster

    grid = activation_grid(model, sample, layer)
    save_raster(grid[None].astype(np.float32) / 255.0, path)
    return grid
