"""SEU-Net and the plain U-Net baseline.

Both share one topology: ``height`` encoder stages of two conv-norm-relu
blocks followed by subsampling, a bottleneck, and mirrored decoder stages of
upsampling, skip concatenation and two blocks, closed by a 1x1 head. Channels
double on every subsampling and halve on every upsampling.

The SEU-Net wraps that core between a Gaussian lifting and a max-projection;
its convolutions are scale-cross-correlations acting on ``(N, S, H, W, C)``.
"""
from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .layers import (
    FilterBank,
    NormState,
    concat_channels,
    pool_max_scale,
    pool_quad_scale,
    scale_batch_norm,
    scale_cross_correlation,
    scale_dropout,
    strided_subsample,
    upsample,
)
from .lifting import gaussian_lift, max_project
from .rng import make_rng
from .tensor import (
    Tensor,
    add_bias,
    fan_in_uniform,
    max_pool2d,
    no_grad,
    plane_correlate,
    relu,
    softmax,
    take_index,
)

MAGIC = b"SEUNET1\0"
FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    kind: str = "seunet"
    height: int = 3
    filters: int = 8
    num_scales: int = 4
    gamma: int = 2
    scale_depth: int = 1
    dropout: float = 0.0
    pooling: str = "stride"
    upsample_mode: str = "bilinear"
    level0: str = "sigma0"
    base_sigma: float = 1.0
    num_classes: int = 3
    in_channels: int = 1
    kernel_size: int = 3
    pool_extent: float = 2.0
    quad_c: float = 1.0
    dtype: str = "float32"

    def validate(self) -> "ModelConfig":
        if self.kind not in ("seunet", "unet"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.height < 1 or self.filters < 1 or self.num_scales < 1:
            raise ValueError("height, filters and num_scales must all be >= 1")
        if self.gamma < 2:
            raise ValueError("gamma must be an integer >= 2")
        if self.pooling not in ("stride", "maxscale", "quadscale"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.pooling != "stride" and self.gamma != 2:
            raise ValueError("scale-space pooling halves the grid, which needs gamma == 2")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError("dropout must lie in [0, 1]")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class Model:
    config: ModelConfig
    params: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)
    norms: "OrderedDict[str, NormState]" = field(default_factory=OrderedDict)
    meta: dict = field(default_factory=dict)

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict((name, p.data) for name, p in self.params.items())
        for name, st in self.norms.items():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        return out

    def __call__(self, x, training=False, rng=None):
        return forward(self, x, training, rng)


# ---------------------------------------------------------------- construction


def _stage_channels(cfg: ModelConfig):
    """(name, c_in, c_out) for every double block in forward order."""
    c = cfg.filters
    stages = []
    cin = cfg.in_channels
    for i in range(cfg.height):
        stages.append((f"enc{i}", cin, c * 2**i))
        cin = c * 2**i
    stages.append(("mid", cin, c * 2**cfg.height))
    below = c * 2**cfg.height
    for i in reversed(range(cfg.height)):
        stages.append((f"dec{i}", below + c * 2**i, c * 2**i))
        below = c * 2**i
    return stages


def _build(cfg: ModelConfig, rng: np.random.Generator, scale_depth: int) -> Model:
    cfg.validate()
    dt = np.dtype(cfg.dtype)
    model = Model(cfg)
    ksz = cfg.kernel_size

    def add_conv(name, cin, cout, size, depth):
        fan_in = depth * size * size * cin
        w = fan_in_uniform(rng, (depth, size, size, cin, cout), fan_in, dt)
        model.params[f"{name}.weight"] = Tensor(w, requires_grad=True, name=f"{name}.weight")
        model.params[f"{name}.bias"] = Tensor(np.zeros(cout, dt), requires_grad=True, name=f"{name}.bias")

    def add_norm(name, ch):
        model.params[f"{name}.gamma"] = Tensor(np.ones(ch, dt), requires_grad=True, name=f"{name}.gamma")
        model.params[f"{name}.beta"] = Tensor(np.zeros(ch, dt), requires_grad=True, name=f"{name}.beta")
        model.norms[name] = NormState(ch)

    for stage, cin, cout in _stage_channels(cfg):
        add_conv(f"{stage}.conv0", cin, cout, ksz, scale_depth)
        add_norm(f"{stage}.norm0", cout)
        add_conv(f"{stage}.conv1", cout, cout, ksz, scale_depth)
        add_norm(f"{stage}.norm1", cout)
    add_conv("head", cfg.filters, cfg.num_classes, 1, 1)
    return model


def build_seunet(config: ModelConfig, rng: np.random.Generator) -> Model:
    """Lifting, scale-equivariant encoder/decoder, scale dropout and projection."""
    if config.kind != "seunet":
        config = ModelConfig(**{**asdict(config), "kind": "seunet"})
    return _build(config, rng, config.scale_depth)


def build_unet(config: ModelConfig, rng: np.random.Generator, match_capacity: bool = True) -> Model:
    """Plane U-Net with the same topology; filters adjusted to match SEU-Net capacity.

    With ``match_capacity`` the base filter count is chosen so the parameter
    count is as close as possible to the SEU-Net built from ``config``.
    """
    cfg = ModelConfig(**{**asdict(config), "kind": "unet"})
    if match_capacity:
        cfg.filters = matched_unet_filters(config)
    cfg.scale_depth = 1
    return _build(cfg, rng, 1)


def count_parameters(config: ModelConfig, scale_depth: int | None = None, filters: int | None = None) -> int:
    cfg = ModelConfig(**asdict(config))
    if filters is not None:
        cfg.filters = filters
    depth = cfg.scale_depth if scale_depth is None else scale_depth
    k = cfg.kernel_size
    total = 0
    for _, cin, cout in _stage_channels(cfg):
        total += depth * k * k * cin * cout + cout + 2 * cout
        total += depth * k * k * cout * cout + cout + 2 * cout
    total += cfg.filters * cfg.num_classes + cfg.num_classes
    return total


def matched_unet_filters(config: ModelConfig) -> int:
    target = count_parameters(config, scale_depth=config.scale_depth)
    best, best_gap = 1, None
    for c in range(1, 8 * config.filters * max(1, config.scale_depth) + 1):
        gap = abs(count_parameters(config, scale_depth=1, filters=c) - target)
        if best_gap is None or gap < best_gap:
            best, best_gap = c, gap
    return best


# ---------------------------------------------------------------- forward


def required_padding(h: int, w: int, height: int):
    m = 2**height
    return (-h) % m, (-w) % m


def _conv(model: Model, name: str, x: Tensor) -> Tensor:
    w = model.params[f"{name}.weight"]
    b = model.params[f"{name}.bias"]
    if model.config.kind == "seunet":
        return scale_cross_correlation(x, FilterBank(w, b), model.config.gamma)
    return add_bias(plane_correlate(x, take_index(w, (0,))), b)


def _block(model: Model, stage: str, x: Tensor, training: bool) -> Tensor:
    for j in range(2):
        x = _conv(model, f"{stage}.conv{j}", x)
        nm = f"{stage}.norm{j}"
        x = scale_batch_norm(x, model.params[f"{nm}.gamma"], model.params[f"{nm}.beta"], model.norms[nm], training)
        x = relu(x)
    return x


def _down(model: Model, x: Tensor) -> Tensor:
    cfg = model.config
    if cfg.kind == "unet":
        return max_pool2d(x, 2)
    if cfg.pooling == "stride":
        return strided_subsample(x, 2)
    if cfg.pooling == "maxscale":
        return pool_max_scale(x, 1, cfg.pool_extent, cfg.gamma)
    return pool_quad_scale(x, 1, cfg.quad_c, cfg.gamma)


def lift_input(model: Model, x: np.ndarray) -> Tensor:
    cfg = model.config
    lifted = gaussian_lift(x.astype(cfg.dtype), cfg.num_scales, cfg.gamma, cfg.base_sigma, cfg.level0)
    return Tensor(lifted.values.astype(cfg.dtype))


def core(model: Model, x: Tensor, training: bool = False) -> Tensor:
    """The encoder/decoder without lifting, head or projection."""
    cfg = model.config
    skips = []
    for i in range(cfg.height):
        x = _block(model, f"enc{i}", x, training)
        skips.append(x)
        x = _down(model, x)
    x = _block(model, "mid", x, training)
    for i in reversed(range(cfg.height)):
        mode = cfg.upsample_mode if cfg.kind == "seunet" else "bilinear"
        x = upsample(x, 2, mode)
        x = concat_channels(x, skips[i])
        x = _block(model, f"dec{i}", x, training)
    return x


def logits(model: Model, batch, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    cfg = model.config
    x = np.asarray(batch.data if isinstance(batch, Tensor) else batch)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != cfg.in_channels:
        raise ValueError(f"expected a (N, H, W, {cfg.in_channels}) batch, got {x.shape}")
    ph, pw = required_padding(x.shape[1], x.shape[2], cfg.height)
    if ph or pw:
        raise ValueError(
            f"input extents {x.shape[1]}x{x.shape[2]} must be divisible by {2**cfg.height}; "
            f"pad by ({ph}, {pw}) pixels"
        )
    if cfg.kind == "seunet":
        h = lift_input(model, x)
        h = core(model, h, training)
        h = _conv(model, "head", h)
        if training and cfg.dropout > 0:
            if rng is None:
                raise ValueError("training with scale dropout needs an rng")
            h = scale_dropout(h, cfg.dropout, rng, training=True)
        return max_project(h)
    h = core(model, Tensor(x.astype(cfg.dtype)), training)
    return _conv(model, "head", h)


def forward(model: Model, batch, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Per-pixel class probabilities ``(N, H, W, num_classes)``."""
    return softmax(logits(model, batch, training, rng), axis=-1)


def predict_labels(model: Model, batch, chunk: int | None = None) -> np.ndarray:
    """Argmax labels in eval mode; ``chunk`` defaults to roughly eight 96x96 images' worth of pixels."""
    x = np.asarray(batch)
    if chunk is None:
        chunk = max(1, (8 * 96 * 96) // max(1, x.shape[1] * x.shape[2]))
    out = []
    with no_grad():
        for i in range(0, x.shape[0], chunk):
            out.append(logits(model, x[i : i + chunk]).data.argmax(axis=-1))
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------- persistence


def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def save_weights(model: Model, path) -> None:
    """Write ``magic | u64 header length | JSON header | payload | 8-byte checksum``."""
    table = []
    chunks = []
    offset = 0
    for name, arr in model.state_arrays().items():
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        table.append({"name": name, "shape": list(a.shape), "dtype": a.dtype.str, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format": "SEUNET1",
        "version": FORMAT_VERSION,
        "config": asdict(model.config),
        "meta": model.meta,
        "tensors": table,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
        fh.write(_checksum(payload))


def read_header(path) -> dict:
    """Parse only the header of a weight file."""
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16 or head[:8] != MAGIC:
            raise ValueError(f"{path}: not a SEUNET1 weight file")
        (hlen,) = struct.unpack("<Q", head[8:16])
        hbytes = fh.read(hlen)
    if len(hbytes) != hlen:
        raise ValueError(f"{path}: truncated header")
    try:
        header = json.loads(hbytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: malformed header ({exc})") from None
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {header.get('version')}")
    header["_payload_start"] = 16 + hlen
    return header


def load_weights(path) -> Model:
    header = read_header(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    start = header["_payload_start"]
    size = sum(t["nbytes"] for t in header["tensors"])
    if len(blob) < start + size + 8:
        raise ValueError(f"{path}: truncated payload ({len(blob) - start} of {size + 8} bytes)")
    payload = blob[start : start + size]
    if _checksum(payload) != blob[start + size : start + size + 8]:
        raise ValueError(f"{path}: checksum mismatch")
    cfg = ModelConfig.from_dict(header["config"])
    builder = build_seunet if cfg.kind == "seunet" else _build_plain
    model = builder(cfg, make_rng(0, "load"))
    model.meta = header.get("meta", {})
    expected = model.state_arrays()
    seen = set()
    for t in header["tensors"]:
        name = t["name"]
        if name not in expected:
            raise ValueError(f"{path}: unexpected tensor {name!r}")
        arr = np.frombuffer(payload, dtype=np.dtype(t["dtype"]), count=int(np.prod(t["shape"], dtype=np.int64)),
                            offset=t["offset"]).reshape(t["shape"])
        if tuple(t["shape"]) != expected[name].shape:
            raise ValueError(f"{path}: shape mismatch for {name!r}: {tuple(t['shape'])} vs {expected[name].shape}")
        _assign(model, name, arr.astype(expected[name].dtype))
        seen.add(name)
    missing = set(expected) - seen
    if missing:
        raise ValueError(f"{path}: missing tensors {sorted(missing)}")
    return model


def _build_plain(cfg: ModelConfig, rng) -> Model:
    return _build(cfg, rng, 1)


def _assign(model: Model, name: str, arr: np.ndarray):
    if name in model.params:
        model.params[name].data = arr.copy()
        return
    norm, _, stat = name.rpartition(".")
    setattr(model.norms[norm], stat, arr.copy())


def clone_model(model: Model) -> Model:
    cfg = ModelConfig(**asdict(model.config))
    out = _build(cfg, make_rng(0, "clone"), cfg.scale_depth if cfg.kind == "seunet" else 1)
    for name, arr in model.state_arrays().items():
        _assign(out, name, arr)
    out.meta = dict(model.meta)
    return out
