"""Residual network with a rectified tap after every block.

Each tap is average-pooled to a common ``tap_size x tap_size`` grid, globally
average-pooled, and the per-block features are concatenated into one vector
that a single linear layer maps to the attribute scores and the overall score.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields

import numpy as np

from .names import ATTRIBUTES
from .tensor import (
    FormatError,
    ShapeError,
    avgpool2d,
    avgpool2d_backward,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    decode_tensor,
    encode_tensor,
    fully_connected,
    fully_connected_backward,
    global_avg_pool,
    global_avg_pool_backward,
    relu,
    relu_backward,
    seeded_rng,
)


class ConfigError(ValueError):
    pass


# ResNet50 stages as (output channels, block count, stride of first block)
_RESNET50_STAGES = ((256, 3, 1), (512, 4, 2), (1024, 6, 2), (2048, 3, 2))


@dataclass(frozen=True)
class TapNetConfig:
    input_size: int = 64
    blocks: tuple = ((8, 1), (16, 2), (32, 2))
    tap_size: int = 8
    stem_channels: int = 8
    stem_kernel: int = 3
    stem_stride: int = 1
    # inner width of a block is channels // bottleneck
    bottleneck: int = 1
    attribute_names: tuple = ATTRIBUTES
    head_bias: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple((int(c), int(s)) for c, s in self.blocks))
        object.__setattr__(self, "attribute_names", tuple(self.attribute_names))
        self.validate()

    @classmethod
    def resnet50(cls, **overrides) -> "TapNetConfig":
        """Full-scale layout: 16 bottleneck blocks, 299 px input, 10 x 10 taps."""
        blocks = []
        for channels, count, stride in _RESNET50_STAGES:
            blocks += [(channels, stride)] + [(channels, 1)] * (count - 1)
        kw = dict(input_size=299, blocks=tuple(blocks), tap_size=10, stem_channels=64,
                  stem_kernel=7, stem_stride=4, bottleneck=4)
        kw.update(overrides)
        return cls(**kw)

    @property
    def num_outputs(self) -> int:
        return len(self.attribute_names)

    @property
    def feature_dim(self) -> int:
        return sum(c for c, _ in self.blocks)

    def stem_extent(self) -> int:
        pad = self.stem_kernel // 2
        return (self.input_size + 2 * pad - self.stem_kernel) // self.stem_stride + 1

    def tap_extents(self) -> list[int]:
        """Spatial size of every block's output."""
        extent, out = self.stem_extent(), []
        for _, stride in self.blocks:
            extent = (extent - 1) // stride + 1
            out.append(extent)
        return out

    def tap_pool(self, extent: int) -> tuple[int, int]:
        """(window, stride) reducing ``extent`` to exactly ``tap_size`` cells.

        Non-overlapping when ``tap_size`` divides ``extent``; otherwise windows
        overlap just enough to cover the whole map.
        """
        stride = extent // self.tap_size
        return extent - (self.tap_size - 1) * stride, stride

    def validate(self) -> None:
        if not self.blocks:
            raise ConfigError("at least one block required")
        if self.num_outputs < 1:
            raise ConfigError("attribute_names must not be empty")
        if len(set(self.attribute_names)) != self.num_outputs:
            raise ConfigError("attribute_names must be unique")
        if self.bottleneck < 1 or any(c % self.bottleneck for c, _ in self.blocks):
            raise ConfigError("block channels must be divisible by bottleneck")
        if any(c < 1 or s < 1 for c, s in self.blocks):
            raise ConfigError("block channels and strides must be positive")
        if self.stem_kernel > self.input_size:
            raise ConfigError("stem kernel larger than input")
        for i, extent in enumerate(self.tap_extents()):
            if extent < self.tap_size:
                raise ConfigError(
                    f"block {i} output is {extent}x{extent}, smaller than tap_size {self.tap_size}")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "blocks":
                v = ",".join(f"{c}:{s}" for c, s in v)
            elif f.name == "attribute_names":
                v = ",".join(v)
            elif isinstance(v, bool):
                v = int(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TapNetConfig":
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in types:
                raise ConfigError(f"unknown model config key {key!r}")
            if key == "blocks":
                kw[key] = tuple(tuple(int(t) for t in b.split(":")) for b in value.split(","))
            elif key == "attribute_names":
                kw[key] = tuple(value.split(","))
            elif key == "head_bias":
                kw[key] = value.lower() in ("1", "true", "yes")
            elif key in ("bn_momentum", "bn_eps"):
                kw[key] = float(value)
            else:
                kw[key] = int(value)
        return cls(**kw)


@dataclass
class ForwardCache:
    """Pooled tap maps, concatenated GAP features and predictions of one pass."""

    taps: list
    features: np.ndarray
    predictions: np.ndarray
    train: bool = False
    trace: dict = field(default_factory=dict, repr=False)


class TapNet:
    """Parameters plus forward/backward of the multi-tap residual network.

    ``params`` holds trainable arrays and ``buffers`` the batch-norm running
    statistics, both keyed by dotted names (``block0.conv2.weight``).
    """

    def __init__(self, config: TapNetConfig, params: dict, buffers: dict):
        self.config = config
        self.params = params
        self.buffers = buffers

    # -- construction -----------------------------------------------------

    @classmethod
    def build(cls, config: TapNetConfig, seed: int = 0, dtype=np.float32) -> "TapNet":
        rng = seeded_rng(seed)
        params, buffers = {}, {}

        def conv(name, c_out, c_in, k):
            std = np.sqrt(2.0 / (c_in * k * k))
            params[name + ".weight"] = (rng.standard_normal((c_out, c_in, k, k)) * std).astype(dtype)

        def bn(name, c):
            params[name + ".gamma"] = np.ones(c, dtype)
            params[name + ".beta"] = np.zeros(c, dtype)
            buffers[name + ".running_mean"] = np.zeros(c, dtype)
            buffers[name + ".running_var"] = np.ones(c, dtype)

        conv("stem.conv", config.stem_channels, 3, config.stem_kernel)
        bn("stem.bn", config.stem_channels)
        c_in = config.stem_channels
        for i, (c_out, stride) in enumerate(config.blocks):
            mid = c_out // config.bottleneck
            p = f"block{i}"
            conv(p + ".conv1", mid, c_in, 1)
            bn(p + ".bn1", mid)
            conv(p + ".conv2", mid, mid, 3)
            bn(p + ".bn2", mid)
            conv(p + ".conv3", c_out, mid, 1)
            bn(p + ".bn3", c_out)
            if c_in != c_out or stride != 1:
                conv(p + ".proj", c_out, c_in, 1)
                bn(p + ".proj_bn", c_out)
            c_in = c_out
        d = config.feature_dim
        params["head.weight"] = (rng.standard_normal((config.num_outputs, d)) * np.sqrt(2.0 / d)).astype(dtype)
        if config.head_bias:
            params["head.bias"] = np.zeros(config.num_outputs, dtype)
        return cls(config, params, buffers)

    def astype(self, dtype) -> "TapNet":
        return TapNet(self.config,
                      {k: v.astype(dtype) for k, v in self.params.items()},
                      {k: v.astype(dtype) for k, v in self.buffers.items()})

    def copy(self) -> "TapNet":
        return self.astype(self.dtype)

    @property
    def dtype(self):
        return self.params["head.weight"].dtype

    def parameter_count(self) -> int:
        return sum(v.size for v in self.params.values())

    def has_projection(self, i: int) -> bool:
        return f"block{i}.proj.weight" in self.params

    # -- forward ----------------------------------------------------------

    def _conv_bn(self, name, bn_name, x, stride, pad, train, new_buffers):
        y = conv2d_forward(x, self.params[name + ".weight"], None, stride, pad)
        res = batchnorm_forward(
            y, self.params[bn_name + ".gamma"], self.params[bn_name + ".beta"],
            self.buffers[bn_name + ".running_mean"], self.buffers[bn_name + ".running_var"],
            train=train, momentum=self.config.bn_momentum, eps=self.config.bn_eps)
        if train:
            new_buffers[bn_name + ".running_mean"] = res.running_mean
            new_buffers[bn_name + ".running_var"] = res.running_var
        return res.out, (name, bn_name, x, stride, pad, res.cache)

    def forward(self, images, train: bool = False) -> ForwardCache:
        """Run the network on ``images`` of shape (N, 3, H, H).

        In train mode batch statistics are used and the running statistics in
        ``self.buffers`` are replaced by their updated values; infer mode has
        no side effects.
        """
        cfg = self.config
        images = np.asarray(images)
        if images.ndim != 4 or images.shape[1:] != (3, cfg.input_size, cfg.input_size):
            raise ShapeError(f"expected images of shape (N, 3, {cfg.input_size}, {cfg.input_size}), "
                             f"got {images.shape}")
        x = images.astype(self.dtype, copy=False)
        new_buffers = {}
        trace = {}

        y, trace["stem"] = self._conv_bn("stem.conv", "stem.bn", x, cfg.stem_stride,
                                         cfg.stem_kernel // 2, train, new_buffers)
        trace["stem_pre"] = y
        x = relu(y)

        taps, feats, block_traces = [], [], []
        for i, (_, stride) in enumerate(cfg.blocks):
            p = f"block{i}"
            units = []
            h1, u = self._conv_bn(p + ".conv1", p + ".bn1", x, 1, 0, train, new_buffers)
            units.append(u)
            h2, u = self._conv_bn(p + ".conv2", p + ".bn2", relu(h1), stride, 1, train, new_buffers)
            units.append(u)
            main, u = self._conv_bn(p + ".conv3", p + ".bn3", relu(h2), 1, 0, train, new_buffers)
            units.append(u)
            if self.has_projection(i):
                short, u = self._conv_bn(p + ".proj", p + ".proj_bn", x, stride, 0, train, new_buffers)
                units.append(u)
            else:
                short = x
            pre = main + short
            out = relu(pre)
            window, pstride = cfg.tap_pool(out.shape[2])
            tap = avgpool2d(out, window, pstride)
            block_traces.append(dict(units=units, h1=h1, h2=h2, pre=pre, out_shape=out.shape,
                                     pool=(window, pstride)))
            taps.append(tap)
            feats.append(global_avg_pool(tap))
            x = out

        features = np.concatenate(feats, axis=1)
        preds = fully_connected(features, self.params["head.weight"], self.params.get("head.bias"))
        trace["blocks"] = block_traces
        if train:
            self.buffers.update(new_buffers)
        return ForwardCache(taps, features, preds, train, trace)

    # -- backward ---------------------------------------------------------

    def tap_gradients(self, cache: ForwardCache, grad_pred) -> list:
        """Gradients of ``sum(grad_pred * predictions)`` w.r.t. each pooled tap map."""
        head = fully_connected_backward(cache.features, self.params["head.weight"], grad_pred)
        grads, start = [], 0
        for tap in cache.taps:
            c = tap.shape[1]
            grads.append(global_avg_pool_backward(tap.shape, head.grad_input[:, start:start + c]))
            start += c
        return grads

    def _unit_backward(self, unit, grad, grads):
        name, bn_name, x, stride, pad, bn_cache = unit
        g = batchnorm_backward(bn_cache, grad)
        grads[bn_name + ".gamma"] = g.grad_params["gamma"]
        grads[bn_name + ".beta"] = g.grad_params["beta"]
        c = conv2d_backward(x, self.params[name + ".weight"], g.grad_input, stride, pad, with_bias=False)
        grads[name + ".weight"] = c.grad_params["weight"]
        return c.grad_input

    def backward(self, cache: ForwardCache, grad_pred) -> dict:
        """Parameter gradients of ``sum(grad_pred * predictions)``.

        ``cache`` must come from :meth:`forward` of this net; train-mode caches
        give gradients through batch statistics.
        """
        grads = {}
        head = fully_connected_backward(cache.features, self.params["head.weight"], grad_pred)
        grads["head.weight"] = head.grad_params["weight"]
        if "head.bias" in self.params:
            grads["head.bias"] = head.grad_params["bias"]
        tap_grads = self.tap_gradients(cache, grad_pred)

        g = None
        for i in reversed(range(len(self.config.blocks))):
            bt = cache.trace["blocks"][i]
            window, pstride = bt["pool"]
            g_tap = avgpool2d_backward(bt["out_shape"], tap_grads[i], window, pstride)
            g = g_tap if g is None else g + g_tap
            g = relu_backward(bt["pre"], g)
            units = bt["units"]
            g_main = self._unit_backward(units[2], g, grads)
            g_main = relu_backward(bt["h2"], g_main)
            g_main = self._unit_backward(units[1], g_main, grads)
            g_main = relu_backward(bt["h1"], g_main)
            g_main = self._unit_backward(units[0], g_main, grads)
            if self.has_projection(i):
                g_short = self._unit_backward(units[3], g, grads)
            else:
                g_short = g
            g = g_main + g_short
        g = relu_backward(cache.trace["stem_pre"], g)
        self._unit_backward(cache.trace["stem"], g, grads)
        return grads


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------

TAPN_MAGIC = b"TAPN"
TAPN_VERSION = 1


def text_to_tensor(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def tensor_to_text(x: np.ndarray) -> str:
    return x.astype(np.uint8).tobytes().decode("utf-8")


def encode_records(records: dict) -> bytes:
    out = [TAPN_MAGIC, struct.pack("<II", TAPN_VERSION, len(records))]
    for name, arr in records.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(encode_tensor(arr))
    return b"".join(out)


def decode_records(buf: bytes) -> dict:
    if buf[:4] != TAPN_MAGIC:
        raise FormatError("not a TAPN checkpoint")
    if len(buf) < 12:
        raise FormatError("truncated checkpoint header")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != TAPN_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos, records = 12, {}
    for _ in range(count):
        if len(buf) < pos + 2:
            raise FormatError("truncated record name")
        (n,) = struct.unpack_from("<H", buf, pos)
        if len(buf) < pos + 2 + n:
            raise FormatError("truncated record name")
        name = buf[pos + 2:pos + 2 + n].decode("utf-8")
        records[name], pos = decode_tensor(buf, pos + 2 + n)
    if pos != len(buf):
        raise FormatError("trailing bytes after last record")
    return records


def save(net: TapNet, path, extra: dict | None = None) -> None:
    """Write ``net`` (and optional extra named arrays) as a TAPN checkpoint."""
    records = {"config": text_to_tensor(net.config.to_text())}
    records.update({"param/" + k: v for k, v in net.params.items()})
    records.update({"buffer/" + k: v for k, v in net.buffers.items()})
    for k, v in (extra or {}).items():
        records["extra/" + k] = np.asarray(v, dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(encode_records(records))


def load_checkpoint(path) -> tuple[TapNet, dict]:
    with open(path, "rb") as fh:
        records = decode_records(fh.read())
    if "config" not in records:
        raise FormatError("checkpoint has no config record")
    try:
        config = TapNetConfig.from_text(tensor_to_text(records["config"]))
    except (ConfigError, ValueError) as exc:
        raise FormatError(f"bad config record: {exc}") from exc
    params, buffers, extra = {}, {}, {}
    for name, arr in records.items():
        kind, _, key = name.partition("/")
        {"param": params, "buffer": buffers, "extra": extra}.get(kind, {})[key] = arr
    expected = TapNet.build(config, seed=0)
    if set(params) != set(expected.params) or set(buffers) != set(expected.buffers):
        raise FormatError("checkpoint records do not match its config")
    for k, v in params.items():
        if v.shape != expected.params[k].shape:
            raise FormatError(f"parameter {k} has shape {v.shape}, expected {expected.params[k].shape}")
    return TapNet(config, params, buffers), extra


def load(path) -> TapNet:
    return load_checkpoint(path)[0]



def rectifier_state(cache: ForwardCache) -> np.ndarray:
    """Boolean on/off pattern of every ReLU evaluated in a forward pass."""
    t = cache.trace
    inputs = [t["stem_pre"]] + [a for b in t["blocks"] for a in (b["h1"], b["h2"], b["pre"])]
    return np.concatenate([(a > 0).ravel() for a in inputs])


def check_gradients(net: TapNet, images, targets, train=True, step=1e-3, tolerance=1e-4):
    """Finite-difference check of :meth:`TapNet.backward` under an MSE loss.

    The net is recomputed in float64; batch-norm running statistics are held
    fixed across evaluations.
    """
    from .tensor import grad_check, mse_loss

    net64 = net.astype(np.float64)
    images = np.asarray(images, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    buffers = dict(net64.buffers)
    cache = net64.forward(images, train=train)
    net64.buffers = dict(buffers)
    analytic = net64.backward(cache, mse_loss(cache.predictions, targets)[1])

    def f(params):
        c = TapNet(net64.config, params, dict(buffers)).forward(images, train=train)
        return mse_loss(c.predictions, targets)[0], rectifier_state(c)

    return grad_check(f, net64.params, analytic, step=step, tolerance=tolerance)
