"""Encoder-decoder backbone, TISN head and PatchGAN discriminator.

The backbone is built at a configurable scale: each level
runs a building block of parallel dilated 3x3 convolutions whose outputs are
concatenated with the block input (dense connection) and squeezed by a 1x1
bottleneck, plus a residual projection of the input. Downsampling is 2x2
max-pooling; upsampling is nearest-neighbour interpolation followed by a 3x3
convolution.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn


class ConfigError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    in_channels: int = 2
    out_channels: int = 1
    levels: int = 3
    base_width: int = 16
    dilation_rates: tuple = (1, 2, 4)
    dropout_rate: float = 0.5
    final_activation: str = "tanh"

    def validate(self) -> None:
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if self.base_width < 1:
            raise ConfigError("base_width must be >= 1")
        if not self.dilation_rates or any(int(d) < 1 for d in self.dilation_rates):
            raise ConfigError("dilation_rates must be positive integers")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.final_activation not in ("tanh", "softmax"):
            raise ConfigError(f"unknown final_activation {self.final_activation!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dilation_rates"] = list(self.dilation_rates)
        return d


@dataclass
class TisnConfig(GeneratorConfig):
    out_channels: int = 2
    dropout_rate: float = 0.0
    final_activation: str = "softmax"


@dataclass
class DiscriminatorConfig:
    in_channels: int = 3
    layers: int = 3
    base_width: int = 16
    patch_output: bool = True

    def validate(self) -> None:
        if self.layers < 1:
            raise ConfigError("discriminator needs at least one layer")
        if self.base_width < 1:
            raise ConfigError("base_width must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _conv_bn_relu(cin: int, cout: int, k: int = 3, dilation: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, padding=dilation * (k // 2), dilation=dilation),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class BuildingBlock(nn.Module):
    def __init__(self, cin: int, cout: int, dilations):
        super().__init__()
        self.paths = nn.ModuleList([_conv_bn_relu(cin, cout, 3, int(d)) for d in dilations])
        self.bottleneck = _conv_bn_relu(cin + len(self.paths) * cout, cout, 1)
        self.project = nn.Identity() if cin == cout else nn.Conv2d(cin, cout, 1)

    def forward(self, x):
        dense = torch.cat([x] + [p(x) for p in self.paths], dim=1)
        return self.bottleneck(dense) + self.project(x)


class UpStep(nn.Module):
    def __init__(self, cin: int, cout: int, dropout: float):
        super().__init__()
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.conv = _conv_bn_relu(cin, cout, 3)
        self.drop = nn.Dropout(dropout) if dropout > 0 else nn.Identity()

    def forward(self, x):
        return self.drop(self.conv(self.up(x)))


class EncoderDecoder(nn.Module):
    """Backbone shared by the generator and the TISN."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        widths = [cfg.base_width * 2**i for i in range(cfg.levels + 1)]
        self.encoders = nn.ModuleList()
        cin = cfg.in_channels
        for i in range(cfg.levels):
            self.encoders.append(BuildingBlock(cin, widths[i], cfg.dilation_rates))
            cin = widths[i]
        self.pool = nn.MaxPool2d(2)
        self.bottom = BuildingBlock(widths[-2], widths[-1], cfg.dilation_rates)
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for i in reversed(range(cfg.levels)):
            self.ups.append(UpStep(widths[i + 1], widths[i], cfg.dropout_rate))
            self.decoders.append(BuildingBlock(2 * widths[i], widths[i], cfg.dilation_rates))
        self.head = nn.Conv2d(widths[0], cfg.out_channels, 1)

    @property
    def divisor(self) -> int:
        return 2 ** self.cfg.levels

    def check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected (N, {self.cfg.in_channels}, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % self.divisor or w % self.divisor:
            raise ConfigError(f"tile {h}x{w} not divisible by 2**levels = {self.divisor}")

    def logits(self, x):
        self.check_input(x)
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottom(x)
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
        return self.head(x)

    def forward(self, x):
        z = self.logits(x)
        if self.cfg.final_activation == "tanh":
            return torch.tanh(z)
        return torch.softmax(z, dim=1)


class PatchDiscriminator(nn.Module):
    """PatchGAN: a grid of real/fake probabilities, one per ~70x70 patch at depth 3."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        w = cfg.base_width
        layers = [nn.Conv2d(cfg.in_channels, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
        cin = w
        for n in range(1, cfg.layers):
            cout = w * min(2**n, 8)
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.BatchNorm2d(cout),
                       nn.LeakyReLU(0.2, inplace=True)]
            cin = cout
        cout = w * min(2**cfg.layers, 8)
        layers += [nn.Conv2d(cin, cout, 4, stride=1, padding=1), nn.BatchNorm2d(cout),
                   nn.LeakyReLU(0.2, inplace=True), nn.Conv2d(cout, 1, 4, stride=1, padding=1)]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected (N, {self.cfg.in_channels}, H, W) input, got {tuple(x.shape)}")
        return torch.sigmoid(self.model(x))


def patch_grid_size(n: int, layers: int) -> int:
    """Patch-grid length along one axis for an input of length ``n``."""
    for _ in range(layers):
        n = (n + 2 - 4) // 2 + 1
    for _ in range(2):
        n = n + 2 - 4 + 1
    return n


def receptive_field(layers: int) -> int:
    rf = 1
    for _ in range(2):
        rf += 3
    for _ in range(layers):
        rf = rf * 2 + 2
    return rf


def build_generator(cfg: GeneratorConfig | None = None) -> EncoderDecoder:
    cfg = cfg or GeneratorConfig()
    if cfg.final_activation != "tanh":
        raise ConfigError("generator head must be tanh")
    return EncoderDecoder(cfg)


def build_tisn(cfg: TisnConfig | None = None) -> EncoderDecoder:
    cfg = cfg or TisnConfig()
    if cfg.final_activation != "softmax" or cfg.out_channels != 2:
        raise ConfigError("TISN needs a two-channel softmax head")
    return EncoderDecoder(cfg)


def build_discriminator(cfg: DiscriminatorConfig | None = None) -> PatchDiscriminator:
    return PatchDiscriminator(cfg or DiscriminatorConfig())


def count_conv_parameters(model: nn.Module) -> int:
    return sum(p.numel() for m in model.modules() if isinstance(m, nn.Conv2d) for p in m.parameters())


def set_inference_noise(model: nn.Module, enabled: bool) -> nn.Module:
    """Eval mode, optionally keeping dropout (the generator's noise source) live."""
    model.eval()
    for m in model.modules():
        if isinstance(m, nn.Dropout):
            m.train(enabled)
    return model


# --- inference --------------------------------------------------------------

def to_generator_range(img):
    return 2.0 * img - 1.0


def from_generator_range(y):
    return np.clip((np.asarray(y, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)


def replicate_input(tile) -> np.ndarray:
    """``(H, W)`` or ``(N, H, W)`` image(s) in [0, 1] -> ``(N, 2, H, W)`` replicated generator input."""
    tile = np.asarray(tile, dtype=np.float32)
    if tile.ndim == 2:
        tile = tile[None]
    if tile.ndim != 3:
        raise ValueError(f"expected (H, W) or (N, H, W) tiles, got shape {tile.shape}")
    x = to_generator_range(tile)
    return np.stack([x, x], axis=1)


def _model_dtype(model: nn.Module) -> torch.dtype:
    for p in model.parameters():
        return p.dtype
    return torch.float32


@torch.no_grad()
def run_model(model: nn.Module, inputs: np.ndarray, batch_size: int = 8) -> np.ndarray:
    dtype = _model_dtype(model)
    outs = []
    for i in range(0, len(inputs), batch_size):
        outs.append(model(torch.as_tensor(inputs[i:i + batch_size], dtype=dtype)).cpu().numpy())
    return np.concatenate(outs) if outs else np.zeros((0,))


def forward_with_test_time_input(model: nn.Module, scan_tile, noise: bool = False) -> np.ndarray:
    """Pre-segment tile(s): replicate into both input channels, rescale tanh output to [0, 1]."""
    single = np.asarray(scan_tile).ndim == 2
    was_training = model.training
    set_inference_noise(model, noise)
    try:
        y = run_model(model, replicate_input(scan_tile))
    finally:
        model.train(was_training)
    if y.shape[1] != 1:
        raise ValueError("generator must produce a single output channel")
    out = from_generator_range(y[:, 0])
    return out[0] if single else out


def tisn_input(image, second) -> np.ndarray:
    image = np.asarray(image, dtype=np.float32)
    second = np.asarray(second, dtype=np.float32)
    if image.shape != second.shape:
        raise ValueError("TISN channels must share a shape")
    if image.ndim == 2:
        return np.stack([image, second])[None]
    return np.stack([image, second], axis=1)


@torch.no_grad()
def predict_probabilities(model: nn.Module, image, second) -> np.ndarray:
    """Two-channel softmax output for ``(H, W)`` or ``(N, H, W)`` inputs."""
    single = np.asarray(image).ndim == 2
    was_training = model.training
    model.eval()
    try:
        p = run_model(model, tisn_input(image, second))
    finally:
        model.train(was_training)
    return p[0] if single else p


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(path, model: nn.Module, kind: str, config, seed: int, extra: dict | None = None) -> None:
    """State dict plus a JSON sidecar holding the config and seed."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    sidecar = {"kind": kind, "config": config.to_dict(), "seed": seed}
    if extra:
        sidecar.update(extra)
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def load_checkpoint(path) -> tuple[nn.Module, dict]:
    path = Path(path)
    meta_path = path.with_suffix(".json")
    if not path.exists() or not meta_path.exists():
        raise FileNotFoundError(f"checkpoint {path} (or its .json sidecar) not found")
    meta = json.loads(meta_path.read_text())
    kind = meta["kind"]
    cfg = dict(meta["config"])
    if kind == "generator":
        cfg["dilation_rates"] = tuple(cfg["dilation_rates"])
        model = build_generator(GeneratorConfig(**cfg))
    elif kind in ("tisn", "tisn-direct"):
        cfg["dilation_rates"] = tuple(cfg["dilation_rates"])
        model = build_tisn(TisnConfig(**cfg))
    elif kind == "discriminator":
        model = build_discriminator(DiscriminatorConfig(**cfg))
    else:
        raise ConfigError(f"unknown checkpoint kind {kind!r}")
    model.load_state_dict(torch.load(path, weights_only=True))
    model.eval()
    return model, meta
