"""CoordiNet: image encoder, coord-conv pose decoder with confidence pooling,
and a separate log-variance decoder."""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .geometry import InvalidInputError

CONFIDENCE_EPS = 1e-6


class DegeneratePoolingError(ZeroDivisionError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    encoder: str = "tiny"                  # tiny | resnet18 | resnet34
    encoder_widths: tuple = (16, 32, 64, 128)
    truncate_at: str = "layer4"            # torchvision backbones only
    decoder_width: int = 128
    uncertainty_width: int = 64
    pooling: str = "cwap"                  # cwap | gap
    conv: str = "coord"                    # coord | plain
    image_size: tuple = (128, 128)
    translation_mean: tuple = (0.0, 0.0, 0.0)
    translation_scale: float = 1.0

    def __post_init__(self):
        self.encoder_widths = tuple(self.encoder_widths)
        self.image_size = tuple(self.image_size)
        self.translation_mean = tuple(float(v) for v in self.translation_mean)
        if self.pooling not in ("cwap", "gap"):
            raise ValueError(f"pooling must be 'cwap' or 'gap', got {self.pooling!r}")
        if self.conv not in ("coord", "plain"):
            raise ValueError(f"conv must be 'coord' or 'plain', got {self.conv!r}")
        if self.encoder not in ("tiny", "resnet18", "resnet34"):
            raise ValueError(f"unknown encoder {self.encoder!r}")

    @property
    def stride(self) -> int:
        if self.encoder == "tiny":
            return 2 ** len(self.encoder_widths)
        return {"layer1": 4, "layer2": 8, "layer3": 16, "layer4": 32}[self.truncate_at]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        d["image_size"] = list(self.image_size)
        d["translation_mean"] = list(self.translation_mean)
        return d


def coord_channels(H: int, W: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """``(2, H, W)`` grid: channel 0 is x, channel 1 is y, both in [-1, 1].

    A degenerate axis of length 1 gets the coordinate 0.
    """
    if H < 1 or W < 1:
        raise InvalidInputError(f"coordinate grid needs positive dims, got {H}x{W}")
    xs = torch.linspace(-1.0, 1.0, W, dtype=dtype, device=device) if W > 1 else torch.zeros(1, dtype=dtype, device=device)
    ys = torch.linspace(-1.0, 1.0, H, dtype=dtype, device=device) if H > 1 else torch.zeros(1, dtype=dtype, device=device)
    return torch.stack([xs.expand(H, W), ys[:, None].expand(H, W)])


class CoordConv2d(nn.Module):
    """Conv2d on ``[input || x-coords || y-coords]``."""

    def __init__(self, in_channels, out_channels, kernel_size, **kwargs):
        super().__init__()
        self.in_channels = in_channels
        self.conv = nn.Conv2d(in_channels + 2, out_channels, kernel_size, **kwargs)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise InvalidInputError(f"expected (B, {self.in_channels}, H, W), got {tuple(x.shape)}")
        B, _, H, W = x.shape
        grid = coord_channels(H, W, dtype=x.dtype, device=x.device).expand(B, 2, H, W)
        return self.conv(torch.cat([x, grid], dim=1))


def cwap(features: torch.Tensor, confidence: torch.Tensor) -> torch.Tensor:
    """Confidence-weighted spatial mean.

    ``features`` is ``(B, C, H, W)``, ``confidence`` is ``(B, 1, H, W)`` and
    positive. Returns ``(B, C)``.
    """
    if features.shape[-2:] != confidence.shape[-2:]:
        raise InvalidInputError(f"spatial mismatch {tuple(features.shape)} vs {tuple(confidence.shape)}")
    total = confidence.sum(dim=(-2, -1))
    if (total <= 0).any():
        raise DegeneratePoolingError("confidence map sums to zero")
    return (features * confidence).sum(dim=(-2, -1)) / total


def gap(features: torch.Tensor) -> torch.Tensor:
    return features.mean(dim=(-2, -1))


def _conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


def build_encoder(config: ModelConfig) -> tuple[nn.Module, int]:
    """Backbone truncated before any pooling / classification layers."""
    if config.encoder == "tiny":
        layers, cin = [], 3
        for w in config.encoder_widths:
            layers.append(_conv_block(cin, w))
            cin = w
        return nn.Sequential(*layers), cin
    import torchvision

    net = getattr(torchvision.models, config.encoder)(weights=None)
    names = ["conv1", "bn1", "relu", "maxpool", "layer1", "layer2", "layer3", "layer4"]
    if config.truncate_at not in names[4:]:
        raise ValueError(f"truncate_at must be one of {names[4:]}")
    keep = names[: names.index(config.truncate_at) + 1]
    return nn.Sequential(*[getattr(net, n) for n in keep]), encoder_channels(config)


class PoseDecoder(nn.Module):
    """3x3 conv -> ReLU -> 1x1 conv giving 7 per-pixel pose hypotheses (+1 confidence logit)."""

    def __init__(self, in_channels: int, width: int = 128, conv: str = "coord", pooling: str = "cwap"):
        super().__init__()
        self.pooling = pooling
        conv_cls = CoordConv2d if conv == "coord" else nn.Conv2d
        out = 8 if pooling == "cwap" else 7
        self.conv1 = conv_cls(in_channels, width, 3, padding=1)
        self.conv2 = conv_cls(width, out, 1)

    def forward(self, feats):
        h = self.conv2(F.relu(self.conv1(feats)))
        if self.pooling == "cwap":
            confidence = F.softplus(h[:, 7:8]) + CONFIDENCE_EPS
            return cwap(h[:, :7], confidence), confidence
        return gap(h), None


class UncertaintyDecoder(nn.Module):
    def __init__(self, in_channels: int, width: int = 64):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, width, 1)
        self.conv2 = nn.Conv2d(width, 4, 1)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, feats):
        return gap(self.conv2(F.relu(self.conv1(feats))))


@dataclass
class NetworkOutput:
    t: torch.Tensor                 # (B, 3) meters
    q: torch.Tensor                 # (B, 4) unit, (x, y, z, w)
    logvars: torch.Tensor           # (B, 4) (s_Tx, s_Ty, s_Tz, s_R)
    q_raw: torch.Tensor = None      # (B, 4) before normalization, for the loss
    confidence: torch.Tensor = None  # (B, 1, h, w) in cwap mode

    @property
    def variances(self) -> torch.Tensor:
        return torch.exp(self.logvars)


# parameter groups addressable by freeze masks
PARAMETER_GROUPS = ("encoder", "pose_decoder", "uncertainty_decoder")


class CoordiNet(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        self.encoder, enc_channels = build_encoder(self.config)
        self.pose_decoder = PoseDecoder(enc_channels, self.config.decoder_width, self.config.conv, self.config.pooling)
        self.uncertainty_decoder = UncertaintyDecoder(enc_channels, self.config.uncertainty_width)
        self.register_buffer("t_mean", torch.tensor(self.config.translation_mean, dtype=torch.float32))
        self.register_buffer("t_scale", torch.tensor(float(self.config.translation_scale)))
        # free-form metadata saved with checkpoints (training sequences, step counter)
        self.provenance: dict = {}

    def set_translation_normalization(self, mean, scale):
        self.t_mean.copy_(torch.as_tensor(mean, dtype=self.t_mean.dtype))
        self.t_scale.fill_(float(scale))
        self.config.translation_mean = tuple(float(v) for v in self.t_mean.tolist())
        self.config.translation_scale = float(scale)

    def check_input(self, images: torch.Tensor):
        if images.dim() != 4 or images.shape[1] != 3:
            raise InvalidInputError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        H, W = images.shape[-2:]
        s = self.config.stride
        if H % s or W % s:
            raise InvalidInputError(f"image size {H}x{W} is not a multiple of the encoder stride {s}")

    def forward(self, images: torch.Tensor) -> NetworkOutput:
        self.check_input(images)
        feats = self.encoder(images)
        pose, confidence = self.pose_decoder(feats)
        t = self.t_mean + self.t_scale * pose[:, :3]
        q_raw = pose[:, 3:7]
        q = q_raw / q_raw.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        logvars = self.uncertainty_decoder(feats)
        return NetworkOutput(t=t, q=q, logvars=logvars, q_raw=q_raw, confidence=confidence)

    def parameter_groups(self) -> dict:
        return {name: list(getattr(self, name).parameters()) for name in PARAMETER_GROUPS}


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def decoder_param_count(config: ModelConfig) -> int:
    """Trainable parameters of the pose decoder; depends only on channel widths."""
    return count_parameters(PoseDecoder(encoder_channels(config), config.decoder_width, config.conv, config.pooling))


def encoder_channels(config: ModelConfig) -> int:
    if config.encoder == "tiny":
        return config.encoder_widths[-1]
    return {"layer1": 64, "layer2": 128, "layer3": 256, "layer4": 512}[config.truncate_at]


def images_to_tensor(images) -> torch.Tensor:
    """``(B, H, W, 3)`` uint8 or float [0, 1] arrays to ``(B, 3, H, W)`` float tensors."""
    x = torch.as_tensor(images)
    if x.dtype == torch.uint8:
        x = x.float() / 255.0
    if x.dim() == 3:
        x = x[None]
    return x.permute(0, 3, 1, 2).contiguous().float()


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(model: CoordiNet, path, extra: dict | None = None):
    """Atomically write ``{config, state_dict, provenance, extra}``."""
    path = os.fspath(path)
    payload = {
        "format": "coordinet-checkpoint/1",
        "config": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "provenance": model.provenance,
        "extra": extra or {},
    }
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def load_checkpoint(path, expect: ModelConfig | None = None) -> tuple[CoordiNet, dict]:
    """Rebuild a model from a checkpoint; returns ``(model, extra)``.

    If ``expect`` is given, architecture fields must match before any weights
    are assigned.
    """
    try:
        payload = torch.load(os.fspath(path), map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != "coordinet-checkpoint/1":
        raise CheckpointError(f"{path} is not a coordinet checkpoint")
    config = ModelConfig(**payload["config"])
    if expect is not None:
        arch = ("encoder", "encoder_widths", "truncate_at", "decoder_width", "uncertainty_width", "pooling", "conv")
        diff = {k: (getattr(config, k), getattr(expect, k)) for k in arch if getattr(config, k) != getattr(expect, k)}
        if diff:
            raise CheckpointError(f"checkpoint config incompatible: {json.dumps(diff, default=str)}")
    model = CoordiNet(config)
    model.load_state_dict(payload["state_dict"])
    model.provenance = dict(payload.get("provenance", {}))
    return model, payload.get("extra", {})
