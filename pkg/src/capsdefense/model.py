"""Capsule classifier with winning-capsule reconstruction, plus a plain CNN.

The classifier is a convolutional trunk feeding a capsule layer whose output
capsules split into class capsules (their activation-vector lengths drive the
prediction) and background capsules (passed to the decoder unconditionally).
The decoder reconstructs the input from the winning class capsule's pose
together with all background poses.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, FormatError, UsageError

CHECKPOINT_MAGIC = b"CAPSDFL1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 1
    height: int = 20
    width: int = 20
    num_classes: int = 10
    num_capsules: int = 16  # class + background
    caps_dim: int = 8
    in_capsules: int = 16
    trunk_channels: tuple = (16, 16, 32, 32)
    pool_after: tuple = (1, 3)  # conv indices followed by a 2x2 average pool
    caps_projection: int = 0  # optional 1x1 conv width before the capsule reshape
    decoder_hidden: int = 256
    decoder_reshape_channels: int = 32
    decoder_deconv_channels: tuple = (24, 12)
    routing_iters: int = 1
    cycle_weight: float = 0.0005
    recon_weight: float = 0.0005
    margin_pos: float = 0.9
    margin_neg: float = 0.1
    margin_lambda: float = 0.5
    leaky_slope: float = 0.1
    arch: str = "capsule"

    def __post_init__(self):
        if not (self.num_capsules > self.num_classes >= 2):
            raise ConfigurationError(
                f"need num_capsules > num_classes >= 2, got {self.num_capsules}/{self.num_classes}"
            )
        if self.caps_dim < 1 or self.routing_iters < 1:
            raise ConfigurationError("caps_dim and routing_iters must be >= 1")
        down = 2 ** len(self.pool_after)
        if self.height % down or self.width % down:
            raise ConfigurationError(
                f"input {self.height}x{self.width} not divisible by pooling factor {down}"
            )
        cf, fh, fw = self.trunk_output_shape
        if (cf * fh * fw) % self.in_capsules:
            raise ConfigurationError(
                f"trunk output {cf}x{fh}x{fw} not divisible into {self.in_capsules} capsules"
            )
        if self.height % 4 or self.width % 4:
            raise ConfigurationError("image dims must be divisible by 4 for the decoder")

    @property
    def background_capsules(self):
        return self.num_capsules - self.num_classes

    @property
    def trunk_output_shape(self):
        down = 2 ** len(self.pool_after)
        cf = self.caps_projection or self.trunk_channels[-1]
        return cf, self.height // down, self.width // down

    @property
    def in_atoms(self):
        cf, fh, fw = self.trunk_output_shape
        return cf * fh * fw // self.in_capsules

    @property
    def decoder_input_size(self):
        return self.num_capsules * self.caps_dim

    @property
    def image_shape(self):
        return (self.channels, self.height, self.width)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str) -> "ModelConfig":
        kw = {}
        types = {f.name: f.type for f in fields(ModelConfig)}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("meta."):
                continue
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in types:
                raise FormatError(f"unknown model config key: {key!r}")
            t = types[key]
            if t == "tuple":
                kw[key] = tuple(int(x) for x in val.split(",")) if val else ()
            elif t == "float":
                kw[key] = float(val)
            elif t == "int":
                kw[key] = int(val)
            else:
                kw[key] = val
        return ModelConfig(**kw)


def toy_config(**overrides) -> ModelConfig:
    return replace(ModelConfig(), **overrides)


def svhn_config() -> ModelConfig:
    return ModelConfig(
        channels=3, height=32, width=32,
        num_capsules=25, caps_dim=4,
        trunk_channels=(256, 512, 128, 256, 64, 128), pool_after=(1, 3),
        decoder_hidden=1024, decoder_reshape_channels=256,
        decoder_deconv_channels=(64, 32),
    )


def cifar10_config() -> ModelConfig:
    # the published trunk (final width 256 at 8x8) does not divide into
    # 16 capsules of 512 atoms; a channel-halving 1x1 projection restores it
    return ModelConfig(
        channels=3, height=32, width=32,
        num_capsules=25, caps_dim=8,
        trunk_channels=(512, 1024, 256, 512, 128, 256), pool_after=(1, 3),
        caps_projection=128,
        decoder_hidden=1024, decoder_reshape_channels=256,
        decoder_deconv_channels=(64, 32),
    )


@dataclass
class CapsOutput:
    poses: Tensor  # (B, m, d)
    lengths: Tensor  # (B, n) class capsule activation magnitudes
    predictions: np.ndarray  # (B,) argmax over class lengths, low index wins ties


def _trunc_normal(rng, shape, fan_in):
    scale = 1.0 / np.sqrt(fan_in)
    w = rng.standard_normal(shape)
    return (np.clip(w, -2.0, 2.0) * scale).astype(np.float32)


class _ModelBase:
    """Parameter bookkeeping shared by the capsule and CNN models."""

    def __init__(self, config: ModelConfig, seed: int = 0, trainable: bool = True):
        self.config = config
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self.trained_steps = 0
        self._trainable = trainable
        self._build(np.random.default_rng(seed))

    def _add(self, name, data):
        self.params[name] = Tensor(data, requires_grad=self._trainable)
        return self.params[name]

    def parameters(self):
        return list(self.params.values())

    def set_trainable(self, flag: bool):
        self._trainable = flag
        for p in self.params.values():
            p.requires_grad = flag

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def _build_trunk(self, rng):
        c = self.config
        in_ch = c.channels
        for i, out_ch in enumerate(c.trunk_channels):
            self._add(f"trunk.conv{i}.w", _trunc_normal(rng, (out_ch, in_ch, 3, 3), in_ch * 9))
            self._add(f"trunk.conv{i}.b", np.zeros(out_ch, dtype=np.float32))
            in_ch = out_ch
        if c.caps_projection:
            self._add("trunk.proj.w", _trunc_normal(rng, (c.caps_projection, in_ch, 1, 1), in_ch))
            self._add("trunk.proj.b", np.zeros(c.caps_projection, dtype=np.float32))

    def _trunk(self, x: Tensor) -> Tensor:
        c = self.config
        h = x
        for i in range(len(c.trunk_channels)):
            h = ad.conv2d(h, self.params[f"trunk.conv{i}.w"], self.params[f"trunk.conv{i}.b"], 1, 1)
            h = ad.leaky_relu(h, c.leaky_slope)
            if i in c.pool_after:
                h = ad.avg_pool2d(h, 2, 2)
        if c.caps_projection:
            h = ad.conv2d(h, self.params["trunk.proj.w"], self.params["trunk.proj.b"], 1, 0)
            h = ad.leaky_relu(h, c.leaky_slope)
        return h

    def _check_input(self, x) -> tuple[Tensor, bool]:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float32))
        single = x.data.ndim == 3
        if single:
            x = x.reshape((1,) + x.shape)
        if x.shape[1:] != self.config.image_shape:
            raise UsageError(
                f"input shape {x.shape[1:]} does not match model {self.config.image_shape}"
            )
        return x, single

    def astype(self, dtype):
        """Clone with parameters cast to dtype (float64 shadow for grad checks)."""
        clone = object.__new__(type(self))
        clone.config = self.config
        clone.seed = self.seed
        clone.trained_steps = self.trained_steps
        clone._trainable = self._trainable
        clone.params = {
            k: Tensor(p.data.astype(dtype), requires_grad=p.requires_grad)
            for k, p in self.params.items()
        }
        return clone


class CapsNet(_ModelBase):
    has_reconstruction = True

    def _build(self, rng):
        c = self.config
        self._build_trunk(rng)
        self._add(
            "caps.w",
            _trunc_normal(rng, (c.in_capsules, c.in_atoms, c.num_capsules, c.caps_dim), c.in_atoms),
        )
        md = c.decoder_input_size
        cf = c.decoder_reshape_channels
        h4, w4 = c.height // 4, c.width // 4
        self._add("dec.fc0.w", _trunc_normal(rng, (md, c.decoder_hidden), md))
        self._add("dec.fc0.b", np.zeros(c.decoder_hidden, dtype=np.float32))
        self._add("dec.fc1.w", _trunc_normal(rng, (c.decoder_hidden, cf * h4 * w4), c.decoder_hidden))
        self._add("dec.fc1.b", np.zeros(cf * h4 * w4, dtype=np.float32))
        d0, d1 = c.decoder_deconv_channels
        self._add("dec.deconv0.w", _trunc_normal(rng, (cf, d0, 2, 2), cf * 4))
        self._add("dec.deconv0.b", np.zeros(d0, dtype=np.float32))
        self._add("dec.deconv1.w", _trunc_normal(rng, (d0, d1, 2, 2), d0 * 4))
        self._add("dec.deconv1.b", np.zeros(d1, dtype=np.float32))
        self._add("dec.out.w", _trunc_normal(rng, (c.channels, d1, 3, 3), d1 * 9))
        self._add("dec.out.b", np.zeros(c.channels, dtype=np.float32))

    def forward(self, x: Tensor) -> CapsOutput:
        c = self.config
        feat = self._trunk(x)
        u = feat.reshape(feat.shape[0], c.in_capsules, c.in_atoms)
        u_hat = ad.caps_transform(u, self.params["caps.w"])  # (B, I, m, d)
        # routing iteration count 1: coupling coefficients are the softmax of
        # zero logits, i.e. uniform 1/m over output capsules
        s = u_hat.sum(axis=1) * (1.0 / c.num_capsules)
        poses = ad.squash(s, axis=-1)  # (B, m, d)
        class_poses = poses * _class_slice_mask(c, poses.dtype)
        lengths_all = ad.vector_norm(class_poses, axis=-1)  # (B, m)
        lengths = _take_columns(lengths_all, c.num_classes)
        preds = np.argmax(lengths.data, axis=1)
        return CapsOutput(poses=poses, lengths=lengths, predictions=preds)

    def classify(self, x) -> CapsOutput:
        x, single = self._check_input(x)
        return self.forward(x)

    def mask_for_reconstruction(self, poses: Tensor, k) -> Tensor:
        """Zero the losing class-capsule poses, keep class k and all backgrounds.

        k is an int (applied to every row) or a (B,) index array.
        """
        c = self.config
        B = poses.shape[0]
        ks = np.full(B, k, dtype=np.int64) if np.isscalar(k) else np.asarray(k, dtype=np.int64)
        if ks.min() < 0 or ks.max() >= c.num_classes:
            raise UsageError(f"class index out of range [0, {c.num_classes})")
        mask = np.zeros((B, c.num_capsules, 1), dtype=poses.dtype)
        mask[np.arange(B), ks, 0] = 1.0
        mask[:, c.num_classes :, 0] = 1.0
        return (poses * Tensor(mask)).reshape(B, c.decoder_input_size)

    def reconstruct(self, masked: Tensor) -> Tensor:
        c = self.config
        if masked.data.ndim != 2 or masked.shape[1] != c.decoder_input_size:
            raise UsageError(
                f"decoder expects (B, {c.decoder_input_size}), got {masked.shape}"
            )
        B = masked.shape[0]
        h4, w4 = c.height // 4, c.width // 4
        h = ad.leaky_relu(ad.dense(masked, self.params["dec.fc0.w"], self.params["dec.fc0.b"]), c.leaky_slope)
        h = ad.leaky_relu(ad.dense(h, self.params["dec.fc1.w"], self.params["dec.fc1.b"]), c.leaky_slope)
        h = h.reshape(B, c.decoder_reshape_channels, h4, w4)
        h = ad.deconv2d(h, self.params["dec.deconv0.w"], 2)
        h = ad.leaky_relu(h + self.params["dec.deconv0.b"].reshape(1, -1, 1, 1), c.leaky_slope)
        h = ad.deconv2d(h, self.params["dec.deconv1.w"], 2)
        h = ad.leaky_relu(h + self.params["dec.deconv1.b"].reshape(1, -1, 1, 1), c.leaky_slope)
        h = ad.conv2d(h, self.params["dec.out.w"], self.params["dec.out.b"], 1, 1)
        return ad.sigmoid(h)

    def reconstruct_for_class(self, x_or_out, k) -> Tensor:
        out = x_or_out if isinstance(x_or_out, CapsOutput) else self.classify(x_or_out)
        return self.reconstruct(self.mask_for_reconstruction(out.poses, k))

    def margin_loss(self, lengths: Tensor, labels) -> Tensor:
        c = self.config
        single = lengths.data.ndim == 1
        L = lengths.reshape(1, -1) if single else lengths
        labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        if labels.max() >= c.num_classes or labels.min() < 0:
            raise UsageError("label out of range")
        T = np.zeros(L.shape, dtype=L.dtype)
        T[np.arange(L.shape[0]), labels] = 1.0
        pos = (Tensor(np.full(L.shape, c.margin_pos, dtype=L.dtype)) - L).relu() ** 2
        neg = (L - Tensor(np.full(L.shape, c.margin_neg, dtype=L.dtype))).relu() ** 2
        per_sample = (pos * Tensor(T) + neg * Tensor(1.0 - T) * c.margin_lambda).sum(axis=1)
        return per_sample.mean()

    def cycle_loss(self, x) -> Tensor:
        """Cross-entropy pulling the winning reconstruction's classification
        toward the input's own prediction (not the dataset label)."""
        x, _ = self._check_input(x)
        out = self.forward(x)
        recon = self.reconstruct(self.mask_for_reconstruction(out.poses, out.predictions))
        out2 = self.forward(recon)
        return ad.softmax_cross_entropy(out2.lengths, out.predictions).mean()


def _class_slice_mask(config, dtype):
    # zero background capsule norms out of the length vector
    m = np.zeros((1, config.num_capsules, 1), dtype=dtype)
    m[:, : config.num_classes] = 1.0
    return Tensor(m)


def _take_columns(t: Tensor, n: int) -> Tensor:
    # first n columns of a 2-D tensor, differentiable
    def backward(g):
        full = np.zeros(t.data.shape, dtype=t.dtype)
        full[:, :n] = g
        t._accumulate(full)

    return Tensor._node(t.data[:, :n].copy(), (t,), backward)


class BaselineCNN(_ModelBase):
    """Same trunk, capsule layer swapped for conv + global pooling + softmax."""

    has_reconstruction = False

    def _build(self, rng):
        c = self.config
        self._build_trunk(rng)
        cf = c.trunk_output_shape[0]
        self._add("head.conv.w", _trunc_normal(rng, (cf, cf, 3, 3), cf * 9))
        self._add("head.conv.b", np.zeros(cf, dtype=np.float32))
        self._add("head.fc.w", _trunc_normal(rng, (cf, c.num_classes), cf))
        self._add("head.fc.b", np.zeros(c.num_classes, dtype=np.float32))

    def logits(self, x: Tensor) -> Tensor:
        c = self.config
        h = self._trunk(x)
        h = ad.leaky_relu(
            ad.conv2d(h, self.params["head.conv.w"], self.params["head.conv.b"], 1, 1),
            c.leaky_slope,
        )
        pooled = h.reshape(h.shape[0], h.shape[1], -1).mean(axis=2)
        return ad.dense(pooled, self.params["head.fc.w"], self.params["head.fc.b"])

    def classify(self, x) -> CapsOutput:
        x, _ = self._check_input(x)
        z = self.logits(x)
        return CapsOutput(poses=z, lengths=z, predictions=np.argmax(z.data, axis=1))

    def probabilities(self, x) -> np.ndarray:
        with ad.no_grad():
            z = self.classify(x).lengths.data
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, x) -> np.ndarray:
        with ad.no_grad():
            return self.classify(x).predictions

    def reconstruct(self, *_args, **_kw):
        raise UsageError("baseline CNN has no reconstruction path")

    def mask_for_reconstruction(self, *_args, **_kw):
        raise UsageError("baseline CNN has no reconstruction path")


# -- checkpoint serialization -------------------------------------------------


def save_checkpoint(model: _ModelBase, path: str, seed: int | None = None) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    text = model.config.to_text()
    text += f"meta.steps = {model.trained_steps}\n"
    text += f"meta.seed = {model.seed if seed is None else seed}\n"
    raw = text.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", len(model.params)))
    for name, p in model.params.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", p.data.ndim))
        for d in p.data.shape:
            buf.write(struct.pack("<Q", d))
        buf.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path: str, trainable: bool = False) -> _ModelBase:
    with open(path, "rb") as f:
        raw = f.read()
    view = memoryview(raw)
    if raw[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {raw[:8]!r}")
    off = 8
    (version,) = struct.unpack_from("<I", view, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (clen,) = struct.unpack_from("<I", view, off)
    off += 4
    text = bytes(view[off : off + clen]).decode("utf-8")
    off += clen
    config = ModelConfig.from_text(text)
    meta = {}
    for line in text.splitlines():
        if line.startswith("meta."):
            key, _, val = line.partition("=")
            meta[key.strip()] = val.strip()
    seed = int(meta.get("meta.seed", 0))
    cls = CapsNet if config.arch == "capsule" else BaselineCNN
    model = cls(config, seed=seed, trainable=trainable)
    model.trained_steps = int(meta.get("meta.steps", 0))
    (count,) = struct.unpack_from("<I", view, off)
    off += 4
    seen = set()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", view, off)
        off += 4
        name = bytes(view[off : off + nlen]).decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", view, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}Q", view, off)
        off += 8 * rank
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(view, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        if name in seen:
            raise FormatError(f"{path}: duplicate parameter {name!r}")
        seen.add(name)
        if name not in model.params:
            raise FormatError(f"{path}: unexpected parameter {name!r}")
        if model.params[name].data.shape != tuple(dims):
            raise FormatError(f"{path}: shape mismatch for {name!r}")
        model.params[name].data = data.astype(np.float32).copy()
    if seen != set(model.params):
        raise FormatError(f"{path}: missing parameters {set(model.params) - seen}")
    return model
