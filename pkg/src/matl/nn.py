"""Encoder, mask decoder and classifier heads plus their wiring.

Three model modes share one encoder definition:

* ``single_task_classify``: encoder -> classifier
* ``single_task_mask``: encoder -> mask decoder
* ``multi_task``: encoder -> (classifier, mask decoder) from one encoder pass
"""

from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .errors import ConfigError, TrainingError, UsageError

MODES = ("single_task_classify", "single_task_mask", "multi_task")
DILATIONS = (1, 2, 4)
CHECKPOINT_FORMAT = "matl-checkpoint/1"


@dataclass
class ModelConfig:
    input_size: int = 64
    input_channels: int = 3
    encoder_filters: list[int] = field(default_factory=lambda: [8, 16, 32, 64])
    embedding_dim: int = 32
    classifier_hidden: list[int] = field(default_factory=lambda: [64, 64, 32, 32])
    num_classes: int = 3
    decoder_filters: list[int] = field(default_factory=lambda: [32, 16, 8, 4])
    seed: int = 0

    def validate(self) -> "ModelConfig":
        ef, df = list(self.encoder_filters), list(self.decoder_filters)
        if not ef or any(b <= a for a, b in zip(ef, ef[1:])):
            raise ConfigError(f"model.encoder_filters: must be non-empty and strictly ascending, got {ef}")
        if not df or any(b >= a for a, b in zip(df, df[1:])):
            raise ConfigError(f"model.decoder_filters: must be non-empty and strictly descending, got {df}")
        if len(self.classifier_hidden) != 4:
            raise ConfigError(f"model.classifier_hidden: needs exactly 4 widths, got {len(self.classifier_hidden)}")
        if self.num_classes < 2:
            raise ConfigError("model.num_classes: must be >= 2")
        if self.input_size < 2 ** len(ef):
            raise ConfigError(
                f"model.encoder_filters: {len(ef)} stride-2 blocks underflow a {self.input_size}px input")
        if self.input_size % 2 ** len(df):
            raise ConfigError(
                f"model.decoder_filters: input_size {self.input_size} is not divisible by 2**{len(df)}")
        for name in ("input_size", "input_channels", "embedding_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name}: must be positive")
        if min(ef + df + list(self.classifier_hidden)) < 1:
            raise ConfigError("model: layer widths must be positive")
        return self

    def encoder_grid(self) -> int:
        size = self.input_size
        for _ in self.encoder_filters:
            size = (size - 1) // 2 + 1
        return size

    def decoder_grid(self) -> int:
        return self.input_size // 2 ** len(self.decoder_filters)


def _he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    limit = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class _Part:
    """Parameter container shared by the three network parts."""

    prefix = ""

    def __init__(self, dtype):
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}

    def _add(self, name: str, t: Tensor) -> Tensor:
        t.name = f"{self.prefix}.{name}"
        self.params[t.name] = t
        return t

    def _add_bn(self, name: str, channels: int) -> None:
        self._add(f"{name}.gamma", _ones(channels, self.dtype))
        self._add(f"{name}.beta", _zeros(channels, self.dtype))
        self.bn[f"{self.prefix}.{name}"] = BatchNormState(channels, dtype=self.dtype)

    def _p(self, name: str) -> Tensor:
        return self.params[f"{self.prefix}.{name}"]

    def _batch_norm(self, x: Tensor, name: str, training: bool) -> Tensor:
        return ad.batch_norm(x, self._p(f"{name}.gamma"), self._p(f"{name}.beta"),
                             self.bn[f"{self.prefix}.{name}"], training)


class Encoder(_Part):
    """Dilated stride-2 conv blocks followed by a dense projection."""

    prefix = "encoder"

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        super().__init__(dtype)
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 0])
        c_in = cfg.input_channels
        for i, f in enumerate(cfg.encoder_filters):
            self._add(f"conv{i}.weight", _he_uniform(rng, (f, c_in, 3, 3), c_in * 9, dtype))
            self._add_bn(f"bn{i}", f)
            c_in = f
        flat = c_in * cfg.encoder_grid() ** 2
        self._add("dense.weight", _he_uniform(rng, (flat, cfg.embedding_dim), flat, dtype))
        self._add("dense.bias", _zeros(cfg.embedding_dim, dtype))

    def __call__(self, images: Tensor, training: bool = False) -> Tensor:
        x = images
        for i in range(len(self.cfg.encoder_filters)):
            d = DILATIONS[i % len(DILATIONS)]
            x = ad.conv2d(x, self._p(f"conv{i}.weight"), stride=2, dilation=d, padding=d)
            x = ad.relu(self._batch_norm(x, f"bn{i}", training))
        x = ad.reshape(x, (x.shape[0], -1))
        return ad.add_bias(ad.matmul(x, self._p("dense.weight")), self._p("dense.bias"))


class Decoder(_Part):
    """Dense seed grid, transposed-conv upsampling blocks with additive skips.

    Each block computes ``relu(bn(convT(x))) + proj(upsample_nearest(x))``
    where ``proj`` is a 1x1 conv matching channel counts.
    """

    prefix = "decoder"

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        super().__init__(dtype)
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 1])
        g = cfg.decoder_grid()
        c0 = cfg.encoder_filters[-1]
        self._add("dense.weight", _he_uniform(rng, (cfg.embedding_dim, c0 * g * g), cfg.embedding_dim, dtype))
        self._add("dense.bias", _zeros(c0 * g * g, dtype))
        c_in = c0
        for i, f in enumerate(cfg.decoder_filters):
            self._add(f"up{i}.weight", _he_uniform(rng, (c_in, f, 2, 2), c_in * 4, dtype))
            self._add_bn(f"bn{i}", f)
            self._add(f"skip{i}.weight", _he_uniform(rng, (f, c_in, 1, 1), c_in, dtype))
            c_in = f
        self._add("out.weight", _he_uniform(rng, (1, c_in, 3, 3), c_in * 9, dtype))
        self._add("out.bias", _zeros(1, dtype))

    def logits(self, embedding: Tensor, training: bool = False) -> Tensor:
        cfg = self.cfg
        n, g = embedding.shape[0], cfg.decoder_grid()
        x = ad.relu(ad.add_bias(ad.matmul(embedding, self._p("dense.weight")), self._p("dense.bias")))
        x = ad.reshape(x, (n, cfg.encoder_filters[-1], g, g))
        for i in range(len(cfg.decoder_filters)):
            main = ad.conv2d_transpose(x, self._p(f"up{i}.weight"), stride=2)
            main = ad.relu(self._batch_norm(main, f"bn{i}", training))
            # 1x1 projection commutes with nearest upsampling; project first (4x fewer pixels)
            skip = ad.upsample_nearest(ad.conv2d(x, self._p(f"skip{i}.weight")), 2)
            x = ad.add(main, skip)
        x = ad.add_bias(ad.conv2d(x, self._p("out.weight"), padding=1), self._p("out.bias"), axis=1)
        return ad.reshape(x, (n, cfg.input_size, cfg.input_size))

    def __call__(self, embedding: Tensor, training: bool = False) -> Tensor:
        return ad.sigmoid(self.logits(embedding, training))


class Classifier(_Part):
    """Four dense -> batch-norm -> relu layers, then dense + softmax."""

    prefix = "classifier"

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        super().__init__(dtype)
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 2])
        c_in = cfg.embedding_dim
        for i, h in enumerate(cfg.classifier_hidden):
            self._add(f"fc{i}.weight", _he_uniform(rng, (c_in, h), c_in, dtype))
            self._add_bn(f"bn{i}", h)
            c_in = h
        self._add("out.weight", _he_uniform(rng, (c_in, cfg.num_classes), c_in, dtype))
        self._add("out.bias", _zeros(cfg.num_classes, dtype))

    def __call__(self, embedding: Tensor, training: bool = False) -> Tensor:
        x = embedding
        for i in range(len(self.cfg.classifier_hidden)):
            x = ad.relu(self._batch_norm(ad.matmul(x, self._p(f"fc{i}.weight")), f"bn{i}", training))
        x = ad.add_bias(ad.matmul(x, self._p("out.weight")), self._p("out.bias"))
        return ad.softmax(x)


def build_encoder(cfg: ModelConfig, dtype=np.float32) -> Encoder:
    return Encoder(cfg.validate(), dtype)


def build_decoder(cfg: ModelConfig, dtype=np.float32) -> Decoder:
    return Decoder(cfg.validate(), dtype)


def build_classifier(cfg: ModelConfig, dtype=np.float32) -> Classifier:
    return Classifier(cfg.validate(), dtype)


class ForwardOutput(NamedTuple):
    embedding: Tensor
    class_probs: Tensor | None
    mask: Tensor | None


class Model:
    """An encoder plus the heads required by ``mode``."""

    def __init__(self, cfg: ModelConfig, mode: str = "multi_task", dtype=np.float32):
        if mode not in MODES:
            raise ConfigError(f"model_mode: expected one of {MODES}, got {mode!r}")
        cfg.validate()
        self.cfg = cfg
        self.mode = mode
        self.dtype = np.dtype(dtype)
        self.encoder = Encoder(cfg, dtype)
        self.classifier = Classifier(cfg, dtype) if mode != "single_task_mask" else None
        self.decoder = Decoder(cfg, dtype) if mode != "single_task_classify" else None

    @property
    def parts(self) -> list[_Part]:
        return [p for p in (self.encoder, self.classifier, self.decoder) if p is not None]

    @property
    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for part in self.parts:
            out.update(part.params)
        return out

    @property
    def bn_states(self) -> dict[str, BatchNormState]:
        out: dict[str, BatchNormState] = {}
        for part in self.parts:
            out.update(part.bn)
        return out

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def embed(self, images: Tensor, training: bool = False) -> Tensor:
        return self.encoder(images, training)

    def forward(self, images: Tensor, training: bool = False) -> ForwardOutput:
        emb = self.encoder(images, training)
        probs = self.classifier(emb, training) if self.classifier is not None else None
        mask = self.decoder(emb, training) if self.decoder is not None else None
        return ForwardOutput(emb, probs, mask)


def forward(mode: str, model: Model, images: Tensor, training: bool = False) -> ForwardOutput:
    """Run ``model`` checking that it was built for ``mode``."""
    if mode != model.mode:
        raise UsageError(f"forward: requested mode {mode!r} but parameters were built for {model.mode!r}")
    return model.forward(images, training)


class Adam:
    """Adam optimizer keyed by parameter name."""

    def __init__(self, learning_rate: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        if params.keys() != grads.keys():
            raise UsageError("Adam.step: parameter and gradient names differ")
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# checkpoints


def _encode(arr: np.ndarray) -> dict:
    a = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
    return {"shape": list(arr.shape), "dtype": arr.dtype.name, "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode(obj: dict) -> np.ndarray:
    dt = np.dtype(obj["dtype"]).newbyteorder("<")
    return np.frombuffer(base64.b64decode(obj["data"]), dtype=dt).astype(dt.newbyteorder("=")).reshape(obj["shape"])


def save_checkpoint(path, model: Model, extra: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "mode": model.mode,
        "model_config": asdict(model.cfg),
        "params": {name: _encode(t.data) for name, t in model.params.items()},
        "batchnorm": {
            name: {"running_mean": _encode(s.running_mean), "running_var": _encode(s.running_var)}
            for name, s in model.bn_states.items()
        },
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_checkpoint(path) -> tuple[Model, dict]:
    """Return the restored model and the checkpoint's ``extra`` dictionary."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise UsageError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    cfg = ModelConfig(**doc["model_config"])
    model = Model(cfg, doc["mode"])
    params = model.params
    if set(params) != set(doc["params"]):
        raise UsageError(f"{path}: parameter names do not match the stored model config")
    for name, t in params.items():
        arr = _decode(doc["params"][name])
        if arr.shape != t.shape:
            raise UsageError(f"{path}: parameter {name} has shape {arr.shape}, config implies {t.shape}")
        t.data = arr.astype(model.dtype)
    for name, s in model.bn_states.items():
        s.running_mean = _decode(doc["batchnorm"][name]["running_mean"]).astype(model.dtype)
        s.running_var = _decode(doc["batchnorm"][name]["running_var"]).astype(model.dtype)
    return model, doc.get("extra", {})
