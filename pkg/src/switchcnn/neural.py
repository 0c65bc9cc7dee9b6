"""Density regressors, the switch classifier, the l2 loss and momentum SGD.

Regressors map a ``(B, 1, H, W)`` grayscale batch to a ``(B, 1, ceil(H/4),
ceil(W/4))`` non-negative density map.  The switch classifier maps a batch to
logits over the available regressors.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import formats

MIN_INPUT = 4


@dataclass(frozen=True)
class ConvLayer:
    kernel_size: int
    out_channels: int
    followed_by_pool: bool = False


@dataclass(frozen=True)
class RegressorSpec:
    name: str
    conv_stack: tuple[ConvLayer, ...]

    def __post_init__(self):
        if len(self.conv_stack) != 4:
            raise ValueError(f"{self.name}: expected 4 feature convolutions, got {len(self.conv_stack)}")
        pools = sum(layer.followed_by_pool for layer in self.conv_stack)
        if pools != 2:
            raise ValueError(f"{self.name}: expected 2 pooling stages, got {pools}")
        for layer in self.conv_stack:
            if layer.kernel_size < 1 or layer.kernel_size % 2 == 0:
                raise ValueError(f"{self.name}: kernel sizes must be odd and positive")
            if layer.out_channels < 1:
                raise ValueError(f"{self.name}: channel counts must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> RegressorSpec:
        return cls(d["name"], tuple(ConvLayer(**layer) for layer in d["conv_stack"]))

    def scaled(self, width: float) -> RegressorSpec:
        """Same topology with every channel count multiplied by ``width``."""
        return RegressorSpec(self.name, tuple(
            ConvLayer(l.kernel_size, max(1, round(l.out_channels * width)), l.followed_by_pool)
            for l in self.conv_stack))


def _stack(k0, c0, k, widths):
    c1, c2, c3 = widths
    return (ConvLayer(k0, c0, True), ConvLayer(k, c1, True), ConvLayer(k, c2), ConvLayer(k, c3))


R1 = RegressorSpec("R1", _stack(9, 16, 7, (32, 16, 8)))
R2 = RegressorSpec("R2", _stack(7, 20, 5, (40, 20, 10)))
R3 = RegressorSpec("R3", _stack(5, 24, 3, (48, 24, 12)))
DEFAULT_SPECS = {"R1": R1, "R2": R2, "R3": R3}


def _gaussian_init(model: nn.Module, seed: int, std: float | None):
    """Zero biases; Gaussian weights with ``std``, or He-normal when ``std`` is None."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("weight"):
                s = (2.0 / p[0].numel()) ** 0.5 if std is None else std
                p.normal_(0.0, s, generator=gen)
            else:
                p.zero_()


HEAD_STD = 0.01


class Regressor(nn.Module):
    def __init__(self, spec: RegressorSpec, seed: int = 0, init_std: float | None = 0.01):
        super().__init__()
        self.spec = spec
        self.seed = seed
        self.init_std = init_std
        self.epoch = 0
        self.momentum_buffers: dict[str, torch.Tensor] = {}
        convs, c_in = [], 1
        for layer in spec.conv_stack:
            convs.append(nn.Conv2d(c_in, layer.out_channels, layer.kernel_size,
                                   padding=layer.kernel_size // 2))
            c_in = layer.out_channels
        self.convs = nn.ModuleList(convs)
        self.head = nn.Conv2d(c_in, 1, 1)
        _gaussian_init(self, seed, init_std)
        # the head sees non-negative features; a half-normal draw keeps its ReLU
        # from starting dead on every pixel, and a small scale keeps initial
        # counts near zero instead of in the hundreds
        with torch.no_grad():
            if init_std is None:
                self.head.weight.mul_(HEAD_STD / self.head.weight.std())
            self.head.weight.abs_()

    @property
    def name(self) -> str:
        return self.spec.name

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer, conv in zip(self.spec.conv_stack, self.convs):
            x = F.relu(conv(x))
            if layer.followed_by_pool:
                x = F.max_pool2d(x, 2, 2, ceil_mode=True)
        return F.relu(self.head(x))

    def config(self) -> dict:
        return {"kind": "regressor", "spec": asdict(self.spec), "seed": self.seed,
                "init_std": self.init_std, "epoch": self.epoch}


def build_regressor(spec: RegressorSpec | str, seed: int, init_std: float | None = 0.01) -> Regressor:
    """Fresh regressor; ``init_std=None`` selects He-normal weight scaling."""
    if isinstance(spec, str):
        if spec not in DEFAULT_SPECS:
            raise ValueError(f"unknown regressor {spec!r}")
        spec = DEFAULT_SPECS[spec]
    return Regressor(spec, seed=seed, init_std=init_std)


def to_batch(pixels, dtype=torch.float32) -> torch.Tensor:
    """``(H, W)`` or ``(B, H, W)`` array to a ``(B, 1, H, W)`` tensor."""
    t = torch.as_tensor(np.asarray(pixels), dtype=dtype)
    if t.ndim == 2:
        t = t[None]
    return t[:, None]


def _param_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def forward_density(reg: Regressor, patch_pixels) -> np.ndarray:
    """Predicted density map for one ``(H, W)`` patch."""
    h, w = np.shape(patch_pixels)
    if min(h, w) < MIN_INPUT:
        raise ValueError(f"input {h}x{w} smaller than the {MIN_INPUT}px minimum")
    with torch.no_grad():
        out = reg(to_batch(patch_pixels, _param_dtype(reg)))
    return out[0, 0].numpy()


def predicted_count(dm, roi=None) -> float:
    dm = np.asarray(dm)
    if roi is None:
        return float(dm.sum())
    roi = np.asarray(roi, dtype=bool)
    if roi.shape != dm.shape:
        raise ValueError(f"mask shape {roi.shape} does not match map shape {dm.shape}")
    return float(dm[roi].sum())


def l2_loss(pred, target, batch_size: int = 1, roi=None):
    """``1/(2N) * sum ||pred - target||^2``; works on tensors and arrays alike."""
    if tuple(pred.shape) != tuple(target.shape):
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    diff = pred - target
    if roi is not None:
        diff = diff * roi
    return (diff ** 2).sum() / (2 * batch_size)


def backward(model: nn.Module, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    for p in model.parameters():
        p.grad = None
    loss.backward()
    grads = {}
    for name, p in model.named_parameters():
        g = torch.zeros_like(p) if p.grad is None else p.grad
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        grads[name] = g
    return grads


def clip_gradients(grads: dict[str, torch.Tensor], max_norm: float | None) -> dict[str, torch.Tensor]:
    """Rescale so the global L2 norm is at most ``max_norm``; None leaves them untouched."""
    if max_norm is None:
        return grads
    total = float(torch.sqrt(sum((g.double() ** 2).sum() for g in grads.values())))
    if total <= max_norm:
        return grads
    return {k: g * (max_norm / total) for k, g in grads.items()}


def sgd_step(model: nn.Module, grads: dict[str, torch.Tensor], lr: float, momentum: float = 0.9):
    """Heavy-ball update: ``v = momentum * v + g``; ``p -= lr * v``."""
    bufs = model.momentum_buffers
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name not in grads:
                raise KeyError(f"no gradient supplied for parameter {name!r}")
            g = grads[name]
            if momentum:
                if name in bufs:
                    bufs[name].mul_(momentum).add_(g)
                else:
                    bufs[name] = g.detach().clone()
                step = bufs[name]
            else:
                step = g
            p.sub_(lr * step)


# --- switch classifier -------------------------------------------------------

_VGG = {
    "cnn_small": [64, 64, "M", 128],
    "vgg16_style": [64, 64, "M", 128, 128, "M", 256, 256, 256, "M",
                    512, 512, 512, "M", 512, 512, 512],
    "vgg19_style": [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M",
                    512, 512, 512, 512, "M", 512, 512, 512, 512],
}
BACKBONES = (*_VGG, "resnet_style")


class _Block(nn.Module):
    def __init__(self, c_in, c_out, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1)
        self.skip = None if stride == 1 and c_in == c_out else nn.Conv2d(c_in, c_out, 1, stride)

    def forward(self, x):
        y = self.conv2(F.relu(self.conv1(x)))
        return F.relu(y + (x if self.skip is None else self.skip(x)))


def _backbone(name: str, width: float) -> tuple[nn.Module, int]:
    def ch(c):
        return max(1, round(c * width))

    if name in _VGG:
        layers, c_in = [], 1
        for v in _VGG[name]:
            if v == "M":
                layers.append(nn.MaxPool2d(2, 2, ceil_mode=True))
            else:
                layers += [nn.Conv2d(c_in, ch(v), 3, padding=1), nn.ReLU()]
                c_in = ch(v)
        return nn.Sequential(*layers), c_in
    if name == "resnet_style":
        layers = [nn.Conv2d(1, ch(64), 7, 2, 3), nn.ReLU(), nn.MaxPool2d(3, 2, 1, ceil_mode=True)]
        c_in = ch(64)
        for i, c in enumerate((64, 128, 256, 512)):
            stride = 1 if i == 0 else 2
            layers += [_Block(c_in, ch(c), stride), _Block(ch(c), ch(c), 1)]
            c_in = ch(c)
        return nn.Sequential(*layers), c_in
    raise ValueError(f"unknown switch backbone {name!r}; choose from {BACKBONES}")


@dataclass
class SwitchConfig:
    backbone: str = "cnn_small"
    input_size: int = 224
    width: float = 1.0
    hidden: int = 512
    num_classes: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown switch backbone {self.backbone!r}; choose from {BACKBONES}")


class SwitchClassifier(nn.Module):
    """Backbone -> global average pool -> FC(hidden) -> FC(num_classes)."""

    def __init__(self, cfg: SwitchConfig):
        super().__init__()
        self.cfg = cfg
        self.epoch = 0
        self.momentum_buffers: dict[str, torch.Tensor] = {}
        self.features, c = _backbone(cfg.backbone, cfg.width)
        self.fc = nn.Linear(c, cfg.hidden)
        self.classifier = nn.Linear(cfg.hidden, cfg.num_classes)
        # no pretrained weights to start from, so always He-normal
        _gaussian_init(self, cfg.seed, None)

    def prepare(self, pixels) -> torch.Tensor:
        x = pixels if torch.is_tensor(pixels) else to_batch(pixels, _param_dtype(self))
        s = self.cfg.input_size
        if tuple(x.shape[-2:]) != (s, s):
            x = F.interpolate(x, size=(s, s), mode="bilinear", align_corners=False)
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        f = self.features(self.prepare(x)).mean(dim=(2, 3))
        return self.classifier(F.relu(self.fc(f)))

    def probabilities(self, pixels) -> np.ndarray:
        with torch.no_grad():
            return F.softmax(self(pixels), dim=1).numpy()

    def route_one(self, sample) -> int:
        """0-based regressor index for one sample (first maximum wins)."""
        return int(np.argmax(self.probabilities(sample.pixels)[0]))

    def config(self) -> dict:
        return {"kind": "switch", "switch": asdict(self.cfg), "epoch": self.epoch}


def build_switch(backbone: str = "cnn_small", seed: int = 0, **kwargs) -> SwitchClassifier:
    return SwitchClassifier(SwitchConfig(backbone=backbone, seed=seed, **kwargs))


def switch_forward(sw: SwitchClassifier, patch_pixels) -> np.ndarray:
    """Class probabilities for one ``(H, W)`` patch."""
    return sw.probabilities(patch_pixels)[0]


# --- checkpoints -------------------------------------------------------------

def save_model(model: Regressor | SwitchClassifier, directory, **extra) -> Path:
    tensors = {f"param/{k}": v.detach().numpy() for k, v in model.state_dict().items()}
    tensors.update({f"momentum/{k}": v.numpy() for k, v in model.momentum_buffers.items()})
    return formats.save_tensors(directory, tensors, {**model.config(), **extra})


def load_model(directory) -> Regressor | SwitchClassifier:
    tensors, meta = formats.load_tensors(directory)
    if meta["kind"] == "regressor":
        model = Regressor(RegressorSpec.from_dict(meta["spec"]), meta["seed"], meta["init_std"])
    elif meta["kind"] == "switch":
        model = SwitchClassifier(SwitchConfig(**meta["switch"]))
    else:
        raise ValueError(f"unknown checkpoint kind {meta['kind']!r}")
    state = {k[len("param/"):]: torch.from_numpy(v.copy())
             for k, v in tensors.items() if k.startswith("param/")}
    model.load_state_dict(state)
    model.momentum_buffers = {k[len("momentum/"):]: torch.from_numpy(v.copy())
                              for k, v in tensors.items() if k.startswith("momentum/")}
    model.epoch = meta.get("epoch", 0)
    return model


@dataclass
class ParameterSnapshot:
    """Bit-level copy of a model's parameters, for update audits."""

    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def of(cls, model: nn.Module) -> ParameterSnapshot:
        return cls({k: v.detach().numpy().copy() for k, v in model.state_dict().items()})

    def equals(self, other: ParameterSnapshot) -> bool:
        return self.tensors.keys() == other.tensors.keys() and all(
            np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors)
