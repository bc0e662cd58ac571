"""Fully-convolutional depth network with hand-written backpropagation.

Encoder-decoder with skip connections; all upsampling is nearest-neighbor
followed by a convolution (no transposed convolutions, which would bring
back checkerboard artifacts), group normalization (batch-independent, so
single-image inference sees the same statistics as training), ELU
activations, and a final 1-channel convolution with linear activation.

Layers are stateless: ``forward`` returns ``(y, tape)`` and ``backward``
consumes the tape, so inference is reentrant. Parameter gradients
accumulate in ``DepthNet.grads``.
"""

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .kernels import col2im_out, im2col_out


class Workspace:
    """Reusable scratch buffers keyed per use site.

    Fresh large allocations fault in new pages on every touch, which
    dominates step time on small models; one workspace per training run
    keeps the pages warm. Passing ``ws=None`` everywhere falls back to
    fresh allocations (used for reentrant inference).
    """

    def __init__(self):
        self._bufs = {}

    def buf(self, key, shape, dtype):
        full = (key, shape, np.dtype(dtype).str)
        arr = self._bufs.get(full)
        if arr is None:
            arr = np.empty(shape, dtype=dtype)
            self._bufs[full] = arr
        return arr


def _buf(ws, key, shape, dtype):
    if ws is None:
        return np.empty(shape, dtype=dtype)
    return ws.buf(key, shape, dtype)

CHECKPOINT_MAGIC = b"SFMD"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    height: int = 256
    width: int = 320
    levels: int = 4
    base_channels: int = 8
    growth: float = 2.0
    max_channels: int = 128
    groups: int = 8
    seed: int = 0
    valid_crop: tuple | None = None  # (x0, y0, x1, y1), exclusive upper bounds

    def __post_init__(self):
        if self.levels < 2:
            raise ConfigError("levels must be >= 2")
        if self.base_channels < 8:
            raise ConfigError("base_channels must be >= 8")
        scale = 2 ** self.levels
        if self.height % scale or self.width % scale:
            raise ConfigError(
                f"input {self.height}x{self.width} not divisible by 2^levels={scale}")
        if self.valid_crop is not None:
            x0, y0, x1, y1 = self.valid_crop
            if not (0 <= x0 < x1 <= self.width and 0 <= y0 < y1 <= self.height):
                raise ConfigError(f"bad valid_crop {self.valid_crop}")

    def channels(self, level: int) -> int:
        c = self.base_channels * self.growth ** level
        c = int(min(round(c), self.max_channels))
        return max(self.groups, (c // self.groups) * self.groups)

    def validity_mask(self) -> np.ndarray:
        m = np.zeros((self.height, self.width), dtype=bool)
        if self.valid_crop is None:
            m[:] = True
        else:
            x0, y0, x1, y1 = self.valid_crop
            m[y0:y1, x0:x1] = True
        return m


# ---------------------------------------------------------------------------
# layers


class Conv2d:
    def __init__(self, cin, cout, rng, dtype, kernel=3, stride=1,
                 weight_std=None, bias_init=0.0):
        k2 = kernel * kernel
        std = weight_std if weight_std is not None else np.sqrt(2.0 / (cin * k2))
        self.weight = rng.normal(0.0, std, size=(cout, cin * k2)).astype(dtype)
        self.bias = np.full(cout, bias_init, dtype=dtype)
        self.kernel = kernel
        self.stride = stride
        self.pad = kernel // 2
        self.cin = cin
        self.cout = cout

    def forward(self, x, ws=None):
        B, C, H, W = x.shape
        k = self.kernel
        Ho = (H + 2 * self.pad - k) // self.stride + 1
        Wo = (W + 2 * self.pad - k) // self.stride + 1
        cols = _buf(ws, (id(self), "cols"), (B, C * k * k, Ho * Wo), x.dtype)
        im2col_out(x, k, k, self.stride, self.pad, cols)
        y = _buf(ws, (id(self), "y"), (B, self.cout, Ho * Wo), x.dtype)
        np.matmul(self.weight[None], cols, out=y)
        y += self.bias[None, :, None]
        return y.reshape(B, self.cout, Ho, Wo), (cols, x.shape)

    def backward(self, dy, cache, grads, prefix, ws=None):
        cols, x_shape = cache
        B, C, H, W = x_shape
        d2 = np.ascontiguousarray(dy).reshape(B, self.cout, -1)
        grads[prefix + ".weight"] += np.matmul(d2, cols.transpose(0, 2, 1)).sum(axis=0)
        grads[prefix + ".bias"] += d2.sum(axis=(0, 2))
        dcols = _buf(ws, (id(self), "dcols"), cols.shape, cols.dtype)
        np.matmul(self.weight.T[None], d2, out=dcols)
        dx = _buf(ws, (id(self), "dx"), (B, C, H, W), cols.dtype)
        return col2im_out(dcols, B, C, H, W, self.kernel, self.kernel,
                          self.stride, self.pad, dx)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}


class GroupNorm:
    def __init__(self, channels, groups, dtype, eps=1e-5):
        if channels % groups:
            raise ConfigError(f"channels {channels} not divisible by groups {groups}")
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.groups = groups
        self.eps = eps

    def forward(self, x, ws=None):
        B, C, H, W = x.shape
        g = self.groups
        xg = x.reshape(B, g, -1)
        mu = xg.mean(axis=2, keepdims=True)
        var = xg.var(axis=2, keepdims=True)
        istd = 1.0 / np.sqrt(var + self.eps)
        xhat = _buf(ws, (id(self), "xhat"), x.shape, x.dtype)
        xh = xhat.reshape(B, g, -1)
        np.subtract(xg, mu, out=xh)
        xh *= istd
        y = _buf(ws, (id(self), "y"), x.shape, x.dtype)
        np.multiply(xhat, self.gamma[None, :, None, None], out=y)
        y += self.beta[None, :, None, None]
        return y, (xhat, istd)

    def backward(self, dy, cache, grads, prefix, ws=None):
        xhat, istd = cache
        B, C, H, W = dy.shape
        g = self.groups
        grads[prefix + ".gamma"] += (dy * xhat).sum(axis=(0, 2, 3))
        grads[prefix + ".beta"] += dy.sum(axis=(0, 2, 3))
        dxh4 = _buf(ws, (id(self), "dxh"), dy.shape, dy.dtype)
        np.multiply(dy, self.gamma[None, :, None, None], out=dxh4)
        dxh = dxh4.reshape(B, g, -1)
        xh = xhat.reshape(B, g, -1)
        m1 = dxh.mean(axis=2, keepdims=True)
        m2 = (dxh * xh).mean(axis=2, keepdims=True)
        dx4 = _buf(ws, (id(self), "dx"), dy.shape, dy.dtype)
        dx = dx4.reshape(B, g, -1)
        np.multiply(xh, m2, out=dx)
        dx += m1
        np.subtract(dxh, dx, out=dx)
        dx *= istd
        return dx4

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}


class Elu:
    def forward(self, x, ws=None):
        y = _buf(ws, (id(self), "y"), x.shape, x.dtype)
        pos = x > 0
        np.minimum(x, 0.0, out=y)
        np.expm1(y, out=y)
        np.copyto(y, x, where=pos)
        return y, (pos, y)

    def backward(self, dy, cache, grads, prefix, ws=None):
        pos, y = cache
        dx = _buf(ws, (id(self), "dx"), dy.shape, dy.dtype)
        np.add(y, 1.0, out=dx)
        np.copyto(dx, 1.0, where=pos)
        dx *= dy
        return dx

    def params(self):
        return {}


class UpsampleNearest:
    def forward(self, x, ws=None):
        B, C, H, W = x.shape
        y = _buf(ws, (id(self), "y", x.shape), (B, C, 2 * H, 2 * W), x.dtype)
        y.reshape(B, C, H, 2, W, 2)[...] = x[:, :, :, None, :, None]
        return y, x.shape

    def backward(self, dy, cache, grads, prefix, ws=None):
        B, C, H, W = cache
        dx = _buf(ws, (id(self), "dx", cache), (B, C, H, W), dy.dtype)
        np.sum(dy.reshape(B, C, H, 2, W, 2), axis=(3, 5), out=dx)
        return dx

    def params(self):
        return {}


class ConvBlock:
    """Conv + GroupNorm + ELU."""

    def __init__(self, cin, cout, rng, dtype, stride=1, groups=8):
        self.conv = Conv2d(cin, cout, rng, dtype, stride=stride)
        self.norm = GroupNorm(cout, min(groups, cout), dtype)
        self.act = Elu()

    def forward(self, x, ws=None):
        y, c1 = self.conv.forward(x, ws)
        y, c2 = self.norm.forward(y, ws)
        y, c3 = self.act.forward(y, ws)
        return y, (c1, c2, c3)

    def backward(self, dy, cache, grads, prefix, ws=None):
        c1, c2, c3 = cache
        dy = self.act.backward(dy, c3, grads, prefix, ws)
        dy = self.norm.backward(dy, c2, grads, prefix + ".norm", ws)
        return self.conv.backward(dy, c1, grads, prefix + ".conv", ws)

    def params(self):
        out = {}
        for k, v in self.conv.params().items():
            out[".conv." + k] = v
        for k, v in self.norm.params().items():
            out[".norm." + k] = v
        return out


# ---------------------------------------------------------------------------
# network


class DepthNet:
    """Shared-weight depth predictor used for both branches of a pair."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(config.seed)
        g = config.groups
        L = config.levels

        self.stem = ConvBlock(3, config.channels(0), rng, dtype, groups=g)
        self.down = []
        self.refine = []
        for lvl in range(1, L + 1):
            cin, cout = config.channels(lvl - 1), config.channels(lvl)
            self.down.append(ConvBlock(cin, cout, rng, dtype, stride=2, groups=g))
            self.refine.append(ConvBlock(cout, cout, rng, dtype, groups=g))
        self.up = []
        for lvl in range(L, 0, -1):
            cin = config.channels(lvl) + config.channels(lvl - 1)
            self.up.append(ConvBlock(cin, config.channels(lvl - 1), rng, dtype, groups=g))
        self.upsample = UpsampleNearest()
        self.head = Conv2d(config.channels(0), 1, rng, dtype,
                           weight_std=1e-3, bias_init=1.0)

        # input standardization buffers, set from the dataset manifest
        self.input_mean = np.full(3, 0.5, dtype=np.float64)
        self.input_std = np.full(3, 0.25, dtype=np.float64)

        self._modules = [("stem", self.stem)]
        self._modules += [(f"down{i}", m) for i, m in enumerate(self.down)]
        self._modules += [(f"refine{i}", m) for i, m in enumerate(self.refine)]
        self._modules += [(f"up{i}", m) for i, m in enumerate(self.up)]
        self._modules.append(("head", self.head))

        self.params = {}
        for name, mod in self._modules:
            pars = mod.params()
            if name == "head":
                pars = {"." + k: v for k, v in pars.items()}
            for k, v in pars.items():
                self.params[name + k] = v
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    # -- architecture introspection (no transposed convolutions anywhere)

    def layer_types(self):
        seen = []
        for _, mod in self._modules:
            seen.append(type(mod).__name__)
        seen.append(type(self.upsample).__name__)
        return seen

    def zero_grads(self):
        for v in self.grads.values():
            v[...] = 0

    def standardize(self, images):
        """HWC [0,1] float images (optionally batched) -> NCHW network input."""
        arr = np.asarray(images, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[None]
        x = (arr - self.input_mean) / self.input_std
        return np.ascontiguousarray(x.transpose(0, 3, 1, 2)).astype(self.dtype)

    def forward(self, x, ws=None):
        """x: (B,3,H,W) in network dtype. Returns ((B,H,W) depth, tape)."""
        tape = []
        skips = []
        y, c = self.stem.forward(x, ws)
        tape.append(("stem", c))
        skips.append(y)
        for i, (dn, rf) in enumerate(zip(self.down, self.refine)):
            y, c = dn.forward(y, ws)
            tape.append((f"down{i}", c))
            y, c = rf.forward(y, ws)
            tape.append((f"refine{i}", c))
            if i < len(self.down) - 1:
                skips.append(y)
        for i, upb in enumerate(self.up):
            y, c = self.upsample.forward(y, ws)
            tape.append(("upsample", c))
            skip = skips.pop()
            cat = _buf(ws, ("cat", i, y.shape, skip.shape),
                       (y.shape[0], y.shape[1] + skip.shape[1], *y.shape[2:]), y.dtype)
            cat[:, :y.shape[1]] = y
            cat[:, y.shape[1]:] = skip
            y = cat
            tape.append(("concat", skip.shape[1]))
            y, c = upb.forward(y, ws)
            tape.append((f"up{i}", c))
        y, c = self.head.forward(y, ws)
        tape.append(("head", c))
        return y[:, 0], tape

    def backward(self, tape, d_out, ws=None):
        """Accumulate parameter gradients; returns nothing (input grad unused)."""
        by_name = dict(self._modules)
        dy = np.ascontiguousarray(d_out[:, None].astype(self.dtype))
        dskips = []
        bottleneck = f"refine{len(self.down) - 1}"
        for name, cache in reversed(tape):
            if name == "upsample":
                dy = self.upsample.backward(dy, cache, self.grads, name, ws)
            elif name == "concat":
                dy, dskip = dy[:, :-cache], dy[:, -cache:]
                dskips.append(dskip)
            else:
                skip_producer = name == "stem" or (name.startswith("refine")
                                                   and name != bottleneck)
                if skip_producer:
                    # second use of this output: the decoder's concat branch
                    dy = dy + dskips.pop()
                dy = by_name[name].backward(dy, cache, self.grads, name, ws)
        return None


def build_model(config: ModelConfig, dtype=np.float32) -> DepthNet:
    """Construct the network; equal seeds give bit-identical parameters."""
    return DepthNet(config, dtype=dtype)


def parameter_count(net: DepthNet) -> int:
    return sum(v.size for v in net.params.values())


def predict(net: DepthNet, image):
    """Depth prediction(s) for HWC image(s) in [0,1]; no scaling applied.

    Returns a single (values, validity) DepthMap-compatible pair via
    :mod:`sfmdepth.layers` for one image, or a list for a batch.
    """
    from .layers import DepthMap

    arr = np.asarray(image, dtype=np.float64)
    single = arr.ndim == 3
    if arr.ndim not in (3, 4):
        raise DataError(f"expected HxWx3 image or batch, got shape {arr.shape}")
    if arr.shape[-3] != net.config.height or arr.shape[-2] != net.config.width \
            or arr.shape[-1] != 3:
        raise DataError(
            f"image shape {arr.shape} does not match configured "
            f"{net.config.height}x{net.config.width}x3")
    x = net.standardize(arr)
    y, _ = net.forward(x)
    crop = net.config.validity_mask()
    maps = [DepthMap(np.asarray(v, dtype=np.float64), crop.copy()) for v in y]
    return maps[0] if single else maps


# ---------------------------------------------------------------------------
# checkpoints (versioned, deterministic bytes, bit-exact resume)


def _config_to_doc(config: ModelConfig) -> dict:
    doc = asdict(config)
    if doc["valid_crop"] is not None:
        doc["valid_crop"] = list(doc["valid_crop"])
    return doc


def _config_from_doc(doc: dict) -> ModelConfig:
    doc = dict(doc)
    if doc.get("valid_crop") is not None:
        doc["valid_crop"] = tuple(doc["valid_crop"])
    return ModelConfig(**doc)


def save_checkpoint(path, net: DepthNet, momentum=None, epoch=0, step=0,
                    rng_state=None, extra=None) -> None:
    arrays = []
    payload = []
    offset = 0

    def add(name, arr):
        nonlocal offset
        a = np.ascontiguousarray(arr)
        arrays.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                       "offset": offset})
        payload.append(a.tobytes())
        offset += len(payload[-1])

    for k in sorted(net.params):
        add("param/" + k, net.params[k])
    if momentum:
        for k in sorted(momentum):
            add("momentum/" + k, momentum[k])
    add("buffer/input_mean", net.input_mean)
    add("buffer/input_std", net.input_std)

    header = {
        "version": CHECKPOINT_VERSION,
        "config": _config_to_doc(net.config),
        "dtype": net.dtype.str,
        "epoch": int(epoch),
        "step": int(step),
        "rng_state": rng_state,
        "extra": extra or {},
        "arrays": arrays,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for chunk in payload:
            fh.write(chunk)


def load_checkpoint(path):
    """Returns (net, momentum, header) with header carrying epoch/step/rng."""
    p = Path(path)
    if not p.is_file():
        raise DataError(f"missing file: {p}")
    with open(p, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise DataError(f"{p}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header["version"] != CHECKPOINT_VERSION:
            raise DataError(f"{p}: unsupported checkpoint version {header['version']}")
        blob = fh.read()

    net = DepthNet(_config_from_doc(header["config"]), dtype=np.dtype(header["dtype"]))
    momentum = {}
    for meta in header["arrays"]:
        a = np.frombuffer(blob, dtype=np.dtype(meta["dtype"]),
                          count=int(np.prod(meta["shape"])) if meta["shape"] else 1,
                          offset=meta["offset"]).reshape(meta["shape"]).copy()
        kind, name = meta["name"].split("/", 1)
        if kind == "param":
            net.params[name][...] = a
        elif kind == "momentum":
            momentum[name] = a
        elif kind == "buffer":
            setattr(net, name, a)
    return net, momentum, header
