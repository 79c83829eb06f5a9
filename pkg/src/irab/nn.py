"""Layer specs, the shared-extractor multi-head model, Adam and EMA.

The model is a feature extractor feeding, in parallel, one density head and
``c`` two-channel segmentation heads (or a single ``c+1``-channel head when
``multiclass`` is set, for the multi-class self-training baseline).
"""
from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, NumericError, ShapeError

_CONV_RE = re.compile(
    r"^k\((\d+),(\d+)\)-c(\d+)-s(\d+)-p(\d+)-d(\d+)(?:-(relu|none))?$")
_POOL_RE = re.compile(r"^maxpool(?:ing)?\((\d+),(\d+)\)$")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: int = 3
    out_channels: int = 0
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in ("conv", "maxpool"):
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ("relu", "none"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.kind == "conv" and (self.kernel < 1 or self.out_channels < 1 or self.stride < 1
                                    or self.padding < 0 or self.dilation < 1):
            raise ConfigError(f"invalid conv layer {self}")

    @classmethod
    def parse(cls, text: str) -> "LayerSpec":
        """Parse ``k(3,3)-c64-s1-p1-d1`` or ``maxpooling(2,2)``.

        A trailing ``-relu``/``-none`` sets the activation (default relu).
        Dilation 0, as printed for 1x1 kernels in some tables, means 1.
        """
        s = text.strip().replace(" ", "")
        m = _POOL_RE.match(s)
        if m:
            if m.group(1) != "2" or m.group(2) != "2":
                raise ConfigError(f"only 2x2 pooling is supported: {text!r}")
            return cls("maxpool", kernel=2, stride=2, activation="none")
        m = _CONV_RE.match(s)
        if not m:
            raise ConfigError(f"cannot parse layer {text!r}")
        kh, kw, c, st, p, d = (int(g) for g in m.groups()[:6])
        if kh != kw:
            raise ConfigError(f"non-square kernels are not supported: {text!r}")
        return cls("conv", kernel=kh, out_channels=c, stride=st, padding=p,
                   dilation=max(d, 1), activation=m.group(7) or "relu")

    def to_string(self) -> str:
        if self.kind == "maxpool":
            return "maxpooling(2,2)"
        s = (f"k({self.kernel},{self.kernel})-c{self.out_channels}-s{self.stride}"
             f"-p{self.padding}-d{self.dilation}")
        return s if self.activation == "relu" else s + "-none"

    def __str__(self) -> str:
        return self.to_string()


def conv(kernel: int, out: int, dilation: int = 1, activation: str = "relu") -> LayerSpec:
    """Same-padded stride-1 conv layer."""
    return LayerSpec("conv", kernel, out, 1, dilation * (kernel // 2), dilation, activation)


POOL = LayerSpec("maxpool", 2, 0, 2, 0, 1, "none")


def _parse_layers(items) -> tuple:
    return tuple(x if isinstance(x, LayerSpec) else LayerSpec.parse(x) for x in items)


@dataclass
class ModelConfig:
    extractor: tuple = ()
    regressor_head: tuple = ()
    seg_head_template: tuple = ()
    num_seg_heads: int = 3
    multiclass: bool = False
    in_channels: int = 1
    downsample_factor: Optional[int] = None

    def __post_init__(self):
        self.extractor = _parse_layers(self.extractor)
        self.regressor_head = _parse_layers(self.regressor_head)
        self.seg_head_template = _parse_layers(self.seg_head_template)
        factor = 1
        for layer in self.extractor + self.regressor_head + self.seg_head_template:
            factor *= layer.stride if layer.kind == "maxpool" else 1
        heads_factor = 1
        for layer in self.regressor_head + self.seg_head_template:
            if layer.kind == "maxpool" or layer.stride != 1:
                heads_factor = 0
        if heads_factor == 0:
            raise ConfigError("heads must preserve spatial resolution")
        if self.downsample_factor is None:
            self.downsample_factor = factor
        elif self.downsample_factor != factor:
            raise ConfigError(f"downsample_factor {self.downsample_factor} != pooling product {factor}")
        if not self.regressor_head or self.regressor_head[-1].out_channels != 1:
            raise ShapeError("density regressor must end in a 1-channel conv")
        if self.num_seg_heads < 0:
            raise ConfigError("num_seg_heads must be nonnegative")
        if self.num_seg_heads:
            if not self.seg_head_template or self.seg_head_template[-1].out_channels != 2:
                raise ShapeError("segmentation heads must end in a 2-channel conv")
        if any(l.stride != 1 for l in self.extractor if l.kind == "conv"):
            raise ConfigError("strided convolutions are not supported in the extractor")

    @classmethod
    def desk(cls, num_seg_heads: int = 3, multiclass: bool = False) -> "ModelConfig":
        """Default desk-scale network: 4 extractor convs, 2 pools, two-layer heads."""
        return cls(
            extractor=(conv(3, 16), conv(3, 16), POOL, conv(3, 32), POOL, conv(3, 32, dilation=2)),
            regressor_head=(conv(3, 16), conv(1, 1, activation="relu")),
            seg_head_template=(conv(3, 16), conv(1, 2, activation="none")),
            num_seg_heads=num_seg_heads,
            multiclass=multiclass,
        )

    @property
    def head_count(self) -> int:
        if self.num_seg_heads == 0:
            return 0
        return 1 if self.multiclass else self.num_seg_heads

    def seg_layers(self) -> tuple:
        if not self.multiclass:
            return self.seg_head_template
        last = self.seg_head_template[-1]
        return self.seg_head_template[:-1] + (
            LayerSpec("conv", last.kernel, self.num_seg_heads + 1, last.stride, last.padding,
                      last.dilation, last.activation),)

    def to_dict(self) -> dict:
        return {
            "extractor": [str(l) for l in self.extractor],
            "regressor_head": [str(l) for l in self.regressor_head],
            "seg_head_template": [str(l) for l in self.seg_head_template],
            "num_seg_heads": self.num_seg_heads,
            "multiclass": self.multiclass,
            "in_channels": self.in_channels,
            "downsample_factor": self.downsample_factor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        allowed = set(cls.__dataclass_fields__)
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelBundle:
    """Parameters of the shared extractor and all heads, plus optional EMA teacher."""

    config: ModelConfig
    params: dict = field(default_factory=dict)
    teacher: Optional[dict] = None

    def parameters(self) -> list:
        return list(self.params.values())

    def group(self, prefix: str) -> dict:
        return {k: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def grads(self) -> dict:
        return {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for k, p in self.params.items()}

    def attach_teacher(self) -> None:
        self.teacher = {k: Tensor(p.data.copy()) for k, p in self.params.items()}

    def clone(self) -> "ModelBundle":
        params = {k: Tensor(p.data.copy(), requires_grad=True) for k, p in self.params.items()}
        teacher = None if self.teacher is None else {k: Tensor(p.data.copy()) for k, p in self.teacher.items()}
        return ModelBundle(copy.deepcopy(self.config), params, teacher)

    def check_finite(self) -> None:
        ag.check_finite((p.data for p in self.params.values()), "parameter")


def _init_stack(layers, in_ch: int, prefix: str, rng: np.random.Generator, params: dict) -> int:
    ch = in_ch
    for i, layer in enumerate(layers):
        if layer.kind != "conv":
            continue
        fan_in = ch * layer.kernel * layer.kernel
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(layer.out_channels, ch, layer.kernel, layer.kernel))
        params[f"{prefix}.{i}.weight"] = Tensor(w, requires_grad=True)
        params[f"{prefix}.{i}.bias"] = Tensor(np.zeros(layer.out_channels), requires_grad=True)
        ch = layer.out_channels
    return ch


def build_model(cfg: ModelConfig, seed: int) -> ModelBundle:
    """He-initialised bundle. Each block draws from its own seeded stream,
    so models that differ only in their segmentation heads share the same
    extractor and density head at equal seeds."""
    params: dict = {}
    feat = _init_stack(cfg.extractor, cfg.in_channels, "extractor",
                       np.random.default_rng([seed, 0]), params)
    _init_stack(cfg.regressor_head, feat, "regressor", np.random.default_rng([seed, 1]), params)
    for k in range(cfg.head_count):
        _init_stack(cfg.seg_layers(), feat, f"seg{k}", np.random.default_rng([seed, 2 + k]), params)
    return ModelBundle(cfg, params)


def _run_stack(layers, x: Tensor, prefix: str, params: dict) -> Tensor:
    for i, layer in enumerate(layers):
        if layer.kind == "maxpool":
            x = ag.max_pool2d(x)
            continue
        x = ag.conv2d(x, params[f"{prefix}.{i}.weight"], params[f"{prefix}.{i}.bias"],
                      stride=layer.stride, padding=layer.padding, dilation=layer.dilation)
        if layer.activation == "relu":
            x = ag.relu(x)
    return x


def _as_image(m: ModelBundle, image) -> Tensor:
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.ndim == 2:
        x = Tensor(x.data[None, None])
    if x.ndim != 4 or x.shape[1] != m.config.in_channels:
        raise ShapeError(f"expected image with {m.config.in_channels} channel(s), got {x.shape}")
    f = m.config.downsample_factor
    if x.shape[2] % f or x.shape[3] % f:
        raise ShapeError(f"image extents {x.shape[2:]} not divisible by downsample factor {f}")
    return x


def extract(m: ModelBundle, image, params: Optional[dict] = None) -> Tensor:
    return _run_stack(m.config.extractor, _as_image(m, image), "extractor", params or m.params)


def regress(m: ModelBundle, feats: Tensor, params: Optional[dict] = None) -> Tensor:
    return _run_stack(m.config.regressor_head, feats, "regressor", params or m.params)


def seg_logits(m: ModelBundle, feats: Tensor, params: Optional[dict] = None) -> list:
    p = params or m.params
    return [_run_stack(m.config.seg_layers(), feats, f"seg{k}", p) for k in range(m.config.head_count)]


def segment(m: ModelBundle, feats: Tensor, params: Optional[dict] = None) -> list:
    """Per-head posteriors; two-channel heads unless the model is multiclass."""
    fn = ag.softmax if m.config.multiclass else ag.channel_softmax
    return [fn(z) for z in seg_logits(m, feats, params)]


def forward_all(m: ModelBundle, image, params: Optional[dict] = None):
    """Density map and segmentation posteriors from one shared extractor pass."""
    feats = extract(m, image, params)
    return regress(m, feats, params), segment(m, feats, params)


def predict_density(m: ModelBundle, image, params: Optional[dict] = None) -> Tensor:
    return regress(m, extract(m, image, params), params)


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def hyper(self) -> dict:
        d = asdict(self)
        del d["m"], d["v"]
        return d


def adam_step(opt: OptimizerState, params: dict, grads: dict) -> dict:
    """One bias-corrected Adam update, applied in place to ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise NumericError(f"adam_step: {bad} non-finite gradient entries in {name!r} "
                               f"at step {opt.step + 1}")
    opt.step += 1
    t = opt.step
    c1 = 1.0 - opt.beta1 ** t
    c2 = 1.0 - opt.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = opt.m.get(name)
        v = opt.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = opt.beta1 * m + (1.0 - opt.beta1) * g
        v = opt.beta2 * v + (1.0 - opt.beta2) * g * g
        opt.m[name], opt.v[name] = m, v
        p.data = p.data - opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return params


def ema_update(teacher: dict, student: dict, alpha: float) -> dict:
    """teacher <- alpha * teacher + (1 - alpha) * student, in place."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"EMA alpha must lie in [0, 1], got {alpha}")
    if teacher.keys() != student.keys():
        raise ShapeError("teacher and student parameter names differ")
    for name, t in teacher.items():
        s = student[name]
        if t.shape != s.shape:
            raise ShapeError(f"{name}: teacher {t.shape} vs student {s.shape}")
        t.data = alpha * t.data + (1.0 - alpha) * s.data
    return teacher
