"""Segmentation-decision network

Two sub-networks: a segmentation sub-network producing a 1024-channel feature volume
`S_f` and a 1-channel logit map `S_h` at 1/8 resolution, and a classification
sub-network reading `[S_f, S_h]` and producing a single image logit `C_p`.
"""
__all__ = [
    "ConfigError", "InputError", "ModelConfig", "ModelOutput", "SegDecNet", "build_model",
    "forward", "save_checkpoint", "load_checkpoint", "CHECKPOINT_VERSION"]
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, NamedTuple

import torch
from torch import nn
from torch.nn import functional as F

log = logging.getLogger(__name__)
CHECKPOINT_VERSION = 1
SEG_FEATURES = 1024
#: total downsampling of segmentation (3 pools) times classification (3 pools)
DIVISOR = 64


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 1
    input_height: int = 128
    input_width: int = 128
    stop_gradient_flow: bool = True
    batch_norm: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.input_channels not in (1, 3):
            raise ConfigError(f"input_channels must be 1 or 3, got {self.input_channels}")
        for name in ("input_height", "input_width"):
            size = getattr(self, name)
            if size <= 0 or size % DIVISOR:
                raise ConfigError(f"{name}={size} is not a positive multiple of {DIVISOR}"
                                  " (pad images at load time)")

    @classmethod
    def from_dict(cls, dct):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in dct.items() if k in known})


class ModelOutput(NamedTuple):
    seg_features: torch.Tensor # S_f: (B, 1024, H/8, W/8)
    seg_logits: torch.Tensor   # S_h: (B, 1, H/8, W/8)
    cls_logit: torch.Tensor    # C_p: (B,)


def _conv(cin, cout, kernel, batch_norm):
    layers = [nn.Conv2d(cin, cout, kernel, padding=kernel // 2, bias=not batch_norm)]
    if batch_norm:
        layers.append(nn.BatchNorm2d(cout))
    layers.append(nn.ReLU(inplace=True))
    return layers


class SegDecNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super(SegDecNet, self).__init__()
        self.config = config
        bn = config.batch_norm
        seg = []
        seg += _conv(config.input_channels, 32, 5, bn) + _conv(32, 32, 5, bn)
        seg.append(nn.MaxPool2d(2))
        seg += _conv(32, 64, 5, bn) + _conv(64, 64, 5, bn) + _conv(64, 64, 5, bn)
        seg.append(nn.MaxPool2d(2))
        for _ in range(4):
            seg += _conv(64, 64, 5, bn)
        seg.append(nn.MaxPool2d(2))
        seg += _conv(64, SEG_FEATURES, 5, bn)
        self.seg_body = nn.Sequential(*seg)
        self.seg_head = nn.Conv2d(SEG_FEATURES, 1, 1)

        cls = [nn.MaxPool2d(2)]
        cls += _conv(SEG_FEATURES + 1, 8, 5, bn)
        cls.append(nn.MaxPool2d(2))
        cls += _conv(8, 16, 5, bn)
        cls.append(nn.MaxPool2d(2))
        cls += _conv(16, 32, 5, bn)
        self.cls_body = nn.Sequential(*cls)
        # [G_a(C_f), G_m(C_f), G_a(S_h), G_m(S_h)]
        self.cls_head = nn.Linear(32 + 32 + 1 + 1, 1)
        self.reset_parameters()

    def reset_parameters(self):
        """variance-scaling init, seeded by `config.seed` without touching global RNG"""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.config.seed)
            for module in self.modules():
                if isinstance(module, (nn.Conv2d, nn.Linear)):
                    nn.init.kaiming_normal_(module.weight, nonlinearity='relu')
                    if module.bias is not None:
                        nn.init.zeros_(module.bias)
                elif isinstance(module, nn.BatchNorm2d):
                    nn.init.ones_(module.weight)
                    nn.init.zeros_(module.bias)

    def parameter_groups(self) -> Dict[str, List[nn.Parameter]]:
        seg = list(self.seg_body.parameters()) + list(self.seg_head.parameters())
        cls = list(self.cls_body.parameters()) + list(self.cls_head.parameters())
        return {'segmentation': seg, 'classification': cls}

    def check_input(self, images: torch.Tensor):
        cfg = self.config
        expected = (cfg.input_channels, cfg.input_height, cfg.input_width)
        if images.dim() != 4 or tuple(images.shape[1:]) != expected:
            raise InputError(f"expected images of shape (B, {', '.join(map(str, expected))}),"
                             f" got {tuple(images.shape)}")

    def forward(self, images: torch.Tensor) -> ModelOutput:
        self.check_input(images)
        seg_features = self.seg_body(images)
        seg_logits = self.seg_head(seg_features)

        cls_in = torch.cat([seg_features, seg_logits], dim=1)
        shortcut = seg_logits
        if self.config.stop_gradient_flow:
            cls_in = cls_in.detach()
            shortcut = shortcut.detach()
        cls_features = self.cls_body(cls_in) # C_f
        pooled = torch.cat([
            F.adaptive_avg_pool2d(cls_features, 1).flatten(1),
            F.adaptive_max_pool2d(cls_features, 1).flatten(1),
            F.adaptive_avg_pool2d(shortcut, 1).flatten(1),
            F.adaptive_max_pool2d(shortcut, 1).flatten(1)], dim=1)
        cls_logit = self.cls_head(pooled).squeeze(1)
        return ModelOutput(seg_features, seg_logits, cls_logit)

    @torch.no_grad()
    def score(self, images: torch.Tensor) -> torch.Tensor:
        """defect probability sigmoid(C_p) per image"""
        training = self.training
        self.eval()
        try:
            return torch.sigmoid(self(images).cls_logit)
        finally:
            self.train(training)


def build_model(config: ModelConfig) -> SegDecNet:
    model = SegDecNet(config)
    log.debug("built model with %d parameters",
              sum(p.numel() for p in model.parameters()))
    return model


def forward(model: SegDecNet, images: torch.Tensor) -> ModelOutput:
    return model(images)


def save_checkpoint(model: SegDecNet, path, **extra):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            'version': CHECKPOINT_VERSION, 'config': asdict(model.config),
            'state_dict': model.state_dict(), **extra}, path)
    log.debug("saved checkpoint:%s", path)
    return path


def load_checkpoint(path, config: ModelConfig = None) -> SegDecNet:
    """
    Load a checkpoint written by `save_checkpoint`.
    Args:
      config: if given, must equal the embedded config
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found:{path}")
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    if ckpt.get('version') != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {ckpt.get('version')!r}")
    stored = ModelConfig.from_dict(ckpt['config'])
    if config is not None and config != stored:
        raise ConfigError(f"{path}: checkpoint config {stored} does not match {config}")
    model = SegDecNet(stored)
    model.load_state_dict(ckpt['state_dict'])
    return model
