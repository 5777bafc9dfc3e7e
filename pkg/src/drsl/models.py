"""Classifier architectures: a dense MLP and a small VGG-style CNN.

Both return raw logits; softmax is applied by the losses and analyses.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from . import container
from .errors import ConfigError, DimensionError, FormatError
from .tensor import Tensor, as_tensor, conv2d, matmul, maxpool2d, relu, reshape

ARCHITECTURES = ("mlp", "vgg-small")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description.

    For ``mlp`` the input is flattened and ``widths`` lists the hidden layer
    sizes. For ``vgg-small`` ``channels`` gives one entry per conv block
    (``convs_per_block`` 3x3 convs followed by a 2x2 max pool) and ``widths``
    the hidden dense layers before the classifier.
    """

    architecture: str = "mlp"
    input_shape: tuple = (1, 28, 28)
    num_classes: int = 10
    widths: tuple = (256, 128)
    channels: tuple = ()
    convs_per_block: int = 2
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "architecture", str(self.architecture).lower())
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}; expected one of {ARCHITECTURES}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (channels, height, width), got {self.input_shape}")
        if any(w < 1 for w in self.widths) or any(c < 1 for c in self.channels):
            raise ConfigError("layer widths and channel counts must be positive")
        if self.architecture == "vgg-small":
            if not self.channels:
                raise ConfigError("vgg-small needs a non-empty channel plan")
            if self.convs_per_block < 1:
                raise ConfigError("convs_per_block must be at least 1")
            _, h, w = self.input_shape
            if h >> len(self.channels) < 1 or w >> len(self.channels) < 1:
                raise ConfigError("too many pooling stages for the input size")

    def layer_shapes(self):
        """Ordered ``(name, shape)`` of every parameter, computed without allocating."""
        shapes = []
        c, h, w = self.input_shape
        if self.architecture == "vgg-small":
            k = 0
            for out in self.channels:
                for _ in range(self.convs_per_block):
                    shapes.append((f"conv{k}.weight", (out, c, 3, 3)))
                    shapes.append((f"conv{k}.bias", (out,)))
                    c = out
                    k += 1
                h, w = h // 2, w // 2
        fan_in = c * h * w
        for i, width in enumerate(self.widths + (self.num_classes,)):
            shapes.append((f"fc{i}.weight", (fan_in, width)))
            shapes.append((f"fc{i}.bias", (width,)))
            fan_in = width
        return shapes

    def param_count(self):
        return int(sum(np.prod(s) for _, s in self.layer_shapes()))

    def to_dict(self):
        d = asdict(self)
        for key in ("input_shape", "widths", "channels"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


MNIST_MLP = ModelConfig("mlp", (1, 28, 28), 10, widths=(256, 128))
CIFAR_VGG_SMALL = ModelConfig("vgg-small", (3, 32, 32), 10, widths=(640,), channels=(32, 64, 128), convs_per_block=2)


@dataclass
class Model:
    config: ModelConfig
    params: dict = field(default_factory=dict)

    def __call__(self, batch):
        return forward(self, batch)

    def freeze(self):
        """Stop tracking parameter gradients; the model is then safe to share read-only."""
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze(self):
        for p in self.params.values():
            p.requires_grad = True
        return self

    @property
    def frozen(self):
        return not any(p.requires_grad for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self):
        return {name: p.data for name, p in self.params.items()}

    def copy(self):
        m = Model(self.config, {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()})
        return m


def init_model(config, seed=None):
    """He-normal weights and zero biases from a seeded generator."""
    seed = config.init_seed if seed is None else seed
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in config.layer_shapes():
        if name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            data = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        params[name] = Tensor(data, requires_grad=True)
    return Model(config, params)


def param_count(model):
    return int(sum(p.size for p in model.params.values()))


def forward(model, batch):
    """Logits of shape (B, num_classes)."""
    x = as_tensor(batch)
    cfg = model.config
    if x.ndim == 3 and cfg.input_shape[0] == 1 and x.shape[1:] == cfg.input_shape[1:]:
        x = reshape(x, (x.shape[0],) + cfg.input_shape)
    if x.ndim != 4 or tuple(x.shape[1:]) != cfg.input_shape:
        raise DimensionError(f"batch shape {x.shape} does not match (B,) + {cfg.input_shape}")
    p = model.params
    h = x
    if cfg.architecture == "vgg-small":
        k = 0
        for _ in cfg.channels:
            for _ in range(cfg.convs_per_block):
                h = relu(conv2d(h, p[f"conv{k}.weight"], p[f"conv{k}.bias"], pad=1))
                k += 1
            h = maxpool2d(h)
    h = reshape(h, (h.shape[0], -1))
    n_dense = len(cfg.widths) + 1
    for i in range(n_dense):
        h = matmul(h, p[f"fc{i}.weight"]) + p[f"fc{i}.bias"]
        if i < n_dense - 1:
            h = relu(h)
    return h


def predict_logits(model, images, batch_size=1000):
    """Tape-free logits for a (possibly large) array of images."""
    images = np.asarray(images, dtype=np.float64)
    out = [forward(model, Tensor(images[i:i + batch_size])).data for i in range(0, len(images), batch_size)]
    if not out:
        return np.zeros((0, model.config.num_classes))
    return np.concatenate(out, axis=0)


def save_checkpoint(model, path, extra=None):
    meta = {"kind": "checkpoint", "config": model.config.to_dict()}
    if extra:
        meta["extra"] = extra
    container.write(path, meta, model.state_arrays())


def load_checkpoint(path):
    meta, arrays = container.read(path)
    if meta.get("kind") != "checkpoint":
        raise FormatError(f"{path} is a DRSL container but not a checkpoint")
    config = ModelConfig.from_dict(meta["config"])
    expected = [name for name, _ in config.layer_shapes()]
    if list(arrays) != expected:
        raise FormatError("checkpoint parameters do not match the stored config")
    model = Model(config, {k: Tensor(v, requires_grad=True) for k, v in arrays.items()})
    return model
