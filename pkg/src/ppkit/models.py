"""Generator and discriminator networks plus the model file format.

Generator wiring (``x`` is the network input in [-1, 1])::

    x0  = PReLU(conv_in(x))
    r   = r + conv_b(PReLU(conv_a(r)))      for each residual block, r starts at x0
    z   = conv_post(r) + x0
    out = tanh(conv_out(z) + x)

The last skip comes from the 3-channel network input; the input-layer
features have ``feature_width`` channels and cannot be added to a 3-channel
output.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import autodiff as ad
from .core.autodiff import DEFAULT_DTYPE, Tensor
from .core.layers import batch_norm, conv2d, dense, prelu
from .core.params import Initializer, ParameterSet

MAGIC = b"PPKM"
FORMAT_VERSION = 1
CODECS = ("VVC", "AV1")
METHODS = ("l1", "perceptual")


class ModelFileError(Exception):
    """Base class for unreadable model files."""


class VersionMismatchError(ModelFileError):
    pass


class TruncatedFileError(ModelFileError):
    pass


class ChecksumError(ModelFileError):
    pass


class TopologyError(ValueError):
    """Parameters do not fit the network they are being loaded into."""


@dataclass(frozen=True)
class GeneratorConfig:
    num_residual_blocks: int = 16
    feature_width: int = 64
    kernel_size: int = 3
    input_block_size: int = 96

    def __post_init__(self):
        if self.num_residual_blocks < 1:
            raise ValueError("num_residual_blocks must be >= 1")
        if self.feature_width < 1:
            raise ValueError("feature_width must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.input_block_size < 16:
            raise ValueError("input_block_size must be >= 16")


@dataclass(frozen=True)
class DiscriminatorConfig:
    base_width: int = 64
    dense_width: int = 1024
    input_block_size: int = 96
    leaky_slope: float = 0.2

    # Input layer followed by the seven batch-normalised layers.
    @property
    def widths(self) -> tuple[int, ...]:
        w = self.base_width
        return (w, w, 2 * w, 2 * w, 4 * w, 4 * w, 8 * w, 8 * w)

    @property
    def strides(self) -> tuple[int, ...]:
        return (1, 2, 1, 2, 1, 2, 1, 2)

    @property
    def final_size(self) -> int:
        s = self.input_block_size
        for st in self.strides:
            s = -(-s // st)
        return s


def _check_blocks(x: Tensor, size: int, what: str) -> None:
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != size or x.shape[3] != size:
        raise ValueError(f"{what} expects blocks shaped (n, 3, {size}, {size}), got {x.shape}")
    if x.shape[0] == 0:
        raise ValueError(f"{what} got an empty batch")


class Generator:
    def __init__(self, config: GeneratorConfig, params: ParameterSet):
        self.config = config
        self.params = params

    @property
    def dtype(self):
        return self.params.dtype

    def forward(self, x: Tensor, taps: dict | None = None) -> Tensor:
        """Enhance a batch of (n, 3, B, B) blocks in [-1, 1]; output stays in [-1, 1].

        ``taps``, when given, receives the input of every PReLU keyed by the
        name of its slope parameter, plus the output convolution's result
        under ``output.conv``.
        """
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        _check_blocks(x, self.config.input_block_size, "generator")
        p = self.params

        def act(h, name):
            if taps is not None:
                taps[name] = h.data
            return prelu(h, p[name])

        x0 = act(conv2d(x, p["input.conv.weight"], p["input.conv.bias"]), "input.prelu.slope")
        r = x0
        for i in range(self.config.num_residual_blocks):
            pre = f"rb{i:02d}"
            h = conv2d(r, p[f"{pre}.conv1.weight"], p[f"{pre}.conv1.bias"])
            h = act(h, f"{pre}.prelu.slope")
            h = conv2d(h, p[f"{pre}.conv2.weight"], p[f"{pre}.conv2.bias"])
            r = r + h
        z = conv2d(r, p["post.conv.weight"], p["post.conv.bias"]) + x0
        out = conv2d(z, p["output.conv.weight"], p["output.conv.bias"])
        if taps is not None:
            taps["output.conv"] = out.data
        return ad.tanh(out + x)

    __call__ = forward

    def load_parameters(self, other_config: GeneratorConfig, arrays: dict[str, np.ndarray]) -> None:
        if other_config != self.config:
            raise TopologyError(f"generator config {other_config} does not match {self.config}")
        _load_checked(self.params, arrays)


class Discriminator:
    def __init__(self, config: DiscriminatorConfig, params: ParameterSet):
        self.config = config
        self.params = params

    @property
    def dtype(self):
        return self.params.dtype

    def forward(self, x: Tensor, mode: str = "train", update_stats: bool = False,
                taps: dict | None = None) -> Tensor:
        """Raw (pre-sigmoid) score per block, shape (n,).

        ``train`` mode normalises with batch statistics; the running
        statistics are only overwritten when ``update_stats`` is set.
        ``taps``, when given, receives the input of every LeakyReLU keyed by
        the layer that produced it (``input``, ``block1`` .. ``block7``,
        ``dense1``).
        """
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        _check_blocks(x, self.config.input_block_size, "discriminator")
        if mode not in ("train", "infer"):
            raise ValueError(f"unknown mode {mode!r}")
        p = self.params
        slope = self.config.leaky_slope

        def act(h, name):
            if taps is not None:
                taps[name] = h.data
            return ad.leaky_relu(h, slope)

        h = act(conv2d(x, p["input.conv.weight"], p["input.conv.bias"]), "input")
        for i, stride in enumerate(self.config.strides[1:], start=1):
            pre = f"block{i}"
            h = conv2d(h, p[f"{pre}.conv.weight"], stride=stride)
            h, rm, rv = batch_norm(h, p[f"{pre}.bn.scale"], p[f"{pre}.bn.shift"], mode,
                                   p[f"{pre}.bn.running_mean"].data, p[f"{pre}.bn.running_var"].data)
            if mode == "train" and update_stats:
                p.set(f"{pre}.bn.running_mean", rm)
                p.set(f"{pre}.bn.running_var", rv)
            h = act(h, pre)
        h = ad.flatten(h)
        h = act(dense(h, p["dense1.weight"], p["dense1.bias"]), "dense1")
        h = dense(h, p["dense2.weight"], p["dense2.bias"])
        return ad.reshape(h, (h.shape[0],))

    __call__ = forward


def _load_checked(params: ParameterSet, arrays: dict[str, np.ndarray]) -> None:
    expected = dict(params.layout())
    got = {k: tuple(np.shape(v)) for k, v in arrays.items()}
    if expected != got:
        raise TopologyError("parameter layout mismatch")
    params.load_arrays(arrays)


def generator_parameters(config: GeneratorConfig, seed: int, dtype=DEFAULT_DTYPE) -> ParameterSet:
    init = Initializer(seed)
    p = ParameterSet(dtype)
    f, k = config.feature_width, config.kernel_size
    init.conv(p, "input.conv", 3, f, k)
    init.prelu(p, "input.prelu", f)
    for i in range(config.num_residual_blocks):
        pre = f"rb{i:02d}"
        init.conv(p, f"{pre}.conv1", f, f, k)
        init.prelu(p, f"{pre}.prelu", f)
        init.conv(p, f"{pre}.conv2", f, f, k)
    init.conv(p, "post.conv", f, f, k)
    init.conv(p, "output.conv", f, 3, k)
    return p


def build_generator(config: GeneratorConfig | None = None, seed: int = 0, dtype=DEFAULT_DTYPE) -> Generator:
    config = config or GeneratorConfig()
    return Generator(config, generator_parameters(config, seed, dtype))


def build_discriminator(config: DiscriminatorConfig | None = None, seed: int = 0,
                        dtype=DEFAULT_DTYPE) -> Discriminator:
    config = config or DiscriminatorConfig()
    init = Initializer(seed)
    p = ParameterSet(dtype)
    widths, c_in = config.widths, 3
    init.conv(p, "input.conv", c_in, widths[0], 3)
    for i in range(1, len(widths)):
        pre = f"block{i}"
        std = np.sqrt(2.0 / (widths[i - 1] * 9))
        p.add(f"{pre}.conv.weight", init.rng.normal(0.0, std, (widths[i], widths[i - 1], 3, 3)))
        init.batch_norm(p, f"{pre}.bn", widths[i])
    flat = widths[-1] * config.final_size ** 2
    init.dense(p, "dense1", flat, config.dense_width)
    init.dense(p, "dense2", config.dense_width, 1)
    return Discriminator(config, p)


@dataclass
class ModelBundle:
    codec: str
    qp_group: str
    method: str
    generator_config: GeneratorConfig
    generator_params: ParameterSet
    discriminator_config: DiscriminatorConfig | None = None
    discriminator_params: ParameterSet | None = None
    format_version: int = FORMAT_VERSION
    extra: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.codec not in CODECS:
            raise ValueError(f"unknown codec {self.codec!r}; expected one of {CODECS}")
        if self.method not in METHODS:
            raise ValueError(f"unknown training method {self.method!r}; expected one of {METHODS}")

    def generator(self, config: GeneratorConfig | None = None) -> Generator:
        """Instantiate the stored generator, optionally checking it against ``config``."""
        if config is not None and config != self.generator_config:
            raise TopologyError(f"model file holds {self.generator_config}, caller expects {config}")
        expected = generator_parameters(self.generator_config, 0, self.generator_params.dtype)
        _load_checked(expected, self.generator_params.arrays())
        return Generator(self.generator_config, expected)

    def discriminator(self) -> Discriminator | None:
        if self.discriminator_config is None or self.discriminator_params is None:
            return None
        return Discriminator(self.discriminator_config, self.discriminator_params)


def _kv_block(items: list[tuple[str, str]]) -> bytes:
    out = [struct.pack("<I", len(items))]
    for k, v in items:
        kb, vb = k.encode("utf-8"), v.encode("utf-8")
        out.append(struct.pack("<I", len(kb)) + kb + struct.pack("<I", len(vb)) + vb)
    return b"".join(out)


def _layout_json(params: ParameterSet) -> str:
    return json.dumps([[k, list(s), params.is_trainable(k)] for k, s in params.layout()])


def checksum64(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def model_to_bytes(bundle: ModelBundle) -> bytes:
    meta = [
        ("codec", bundle.codec),
        ("qp_group", bundle.qp_group),
        ("method", bundle.method),
        ("generator_config", json.dumps(asdict(bundle.generator_config), sort_keys=True)),
        ("generator_layout", _layout_json(bundle.generator_params)),
    ]
    if bundle.discriminator_params is not None:
        meta.append(("discriminator_config", json.dumps(asdict(bundle.discriminator_config), sort_keys=True)))
        meta.append(("discriminator_layout", _layout_json(bundle.discriminator_params)))
    for k in sorted(bundle.extra):
        meta.append((f"x-{k}", bundle.extra[k]))
    body = [MAGIC, struct.pack("<H", bundle.format_version), _kv_block(meta)]
    for ps in (bundle.generator_params, bundle.discriminator_params):
        if ps is None:
            continue
        for _, t in ps.items():
            body.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    payload = b"".join(body)
    return payload + checksum64(payload)


def save_model(bundle: ModelBundle, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(bundle))


class _Reader:
    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"model file truncated at byte {len(self.data)} (needed {self.pos + n})")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def _params_from(layout: list, reader: _Reader) -> ParameterSet:
    ps = ParameterSet(np.float32)
    for name, shape, trainable in layout:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(shape)
        ps.add(name, arr.astype(np.float32), trainable=bool(trainable))
    return ps


def model_from_bytes(data: bytes) -> ModelBundle:
    if data[:4] != MAGIC:
        raise ModelFileError("not a model file (bad magic bytes)")
    reader = _Reader(data, 4)
    version = struct.unpack("<H", reader.take(2))[0]
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"model format version {version}, this build reads {FORMAT_VERSION}")
    try:
        meta = {}
        for _ in range(reader.u32()):
            key = reader.take(reader.u32()).decode("utf-8")
            meta[key] = reader.take(reader.u32()).decode("utf-8")
        layouts = [json.loads(meta["generator_layout"])]
        if "discriminator_layout" in meta:
            layouts.append(json.loads(meta["discriminator_layout"]))
    except TruncatedFileError:
        raise
    except (UnicodeDecodeError, ValueError, KeyError) as exc:
        if checksum64(data[:-8]) != data[-8:]:
            raise ChecksumError("model file checksum mismatch (corrupted metadata)") from exc
        raise ModelFileError(f"malformed model metadata: {exc}") from exc

    n_values = sum(int(np.prod(s)) if s else 1 for layout in layouts for _, s, _ in layout)
    expected = reader.pos + 4 * n_values + 8
    if len(data) < expected:
        raise TruncatedFileError(f"model file has {len(data)} bytes, expected {expected}")
    if len(data) > expected or checksum64(data[:-8]) != data[-8:]:
        raise ChecksumError("model file checksum mismatch")

    gen_params = _params_from(layouts[0], reader)
    disc_cfg = disc_params = None
    if len(layouts) > 1:
        disc_cfg = DiscriminatorConfig(**json.loads(meta["discriminator_config"]))
        disc_params = _params_from(layouts[1], reader)
    extra = {k[2:]: v for k, v in meta.items() if k.startswith("x-")}
    return ModelBundle(
        codec=meta["codec"], qp_group=meta["qp_group"], method=meta["method"],
        generator_config=GeneratorConfig(**json.loads(meta["generator_config"])),
        generator_params=gen_params, discriminator_config=disc_cfg,
        discriminator_params=disc_params, format_version=version, extra=extra,
    )


def load_model(path) -> ModelBundle:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


def bundles_equal(a: ModelBundle, b: ModelBundle) -> bool:
    """Bit-level equality of two bundles, metadata included."""
    if (a.codec, a.qp_group, a.method, a.generator_config, a.discriminator_config, a.format_version,
            a.extra) != (b.codec, b.qp_group, b.method, b.generator_config, b.discriminator_config,
                         b.format_version, b.extra):
        return False
    for pa, pb in ((a.generator_params, b.generator_params), (a.discriminator_params, b.discriminator_params)):
        if (pa is None) != (pb is None):
            return False
        if pa is None:
            continue
        if pa.layout() != pb.layout():
            return False
        for (_, ta), (_, tb) in zip(pa.items(), pb.items()):
            if ta.data.astype("<f4").tobytes() != tb.data.astype("<f4").tobytes():
                return False
    return True
