"""2.5D residual U-Net with a region-classification branch and organ attention."""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

ATTENTION_EPS = 1e-5


@dataclass
class NetworkConfig:
    S: int = 5
    H: int = 48
    W: int = 48
    C: int = 9
    R: int = 5
    levels: int = 4
    base_width: int = 16
    attention_epsilon: float = ATTENTION_EPS
    # None: two layers of 4 * base_width; () or 0 width: no classification branch
    cls_hidden: tuple | None = None

    def __post_init__(self):
        if self.attention_epsilon <= 0:
            raise ValueError("attention epsilon must be > 0")
        if self.C < 2:
            raise ValueError("need at least one organ plus background")
        if self.S < 1 or self.levels < 1 or self.base_width < 1:
            raise ValueError("S, levels and base_width must be positive")
        step = 2 ** (self.levels - 1)
        if self.H % step or self.W % step:
            raise ValueError(f"H, W must be divisible by {step} for {self.levels} levels")
        if self.cls_hidden is None:
            self.cls_hidden = (4 * self.base_width, 4 * self.base_width)
        self.cls_hidden = tuple(int(h) for h in self.cls_hidden)

    @property
    def has_classifier(self) -> bool:
        return len(self.cls_hidden) > 0 and min(self.cls_hidden) > 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cls_hidden"] = list(self.cls_hidden)
        return d


@dataclass
class NetworkOutput:
    """Batched network heads; index ``[b]`` for a single item."""

    organ_logits: torch.Tensor  # [B, C-1, H, W]
    background_logit: torch.Tensor  # [B, 1, H, W]
    attention: torch.Tensor | None  # [B, C-1] in (0, 1)
    region_logits: torch.Tensor  # [B, R]
    features: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return self.organ_logits.shape[0]

    def __getitem__(self, i):
        return NetworkOutput(
            self.organ_logits[i], self.background_logit[i],
            None if self.attention is None else self.attention[i],
            self.region_logits[i],
        )


class ResBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.skip = nn.Identity() if cin == cout else nn.Sequential(
            nn.Conv2d(cin, cout, 1, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return F.relu(y + self.skip(x))


class ClassificationBranch(nn.Module):
    """Global-pooled bottleneck -> shared FC stack -> two separate last layers."""

    def __init__(self, cin, hidden, R, n_organs):
        super().__init__()
        layers = []
        for h in hidden:
            layers += [nn.Linear(cin, h), nn.ReLU(inplace=True)]
            cin = h
        self.shared = nn.Sequential(*layers)
        self.region = nn.Linear(cin, R)
        self.attention = nn.Linear(cin, n_organs)

    def forward(self, bottleneck):
        h = self.shared(bottleneck.mean(dim=(2, 3)))
        return self.region(h), torch.sigmoid(self.attention(h))


class SegmentationNet(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        widths = [config.base_width * 2 ** i for i in range(config.levels)]
        self.encoder = nn.ModuleList()
        cin = config.S
        for w in widths:
            self.encoder.append(ResBlock(cin, w))
            cin = w
        self.up = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for w_hi, w_lo in zip(widths[::-1][:-1], widths[::-1][1:]):
            self.up.append(nn.ConvTranspose2d(w_hi, w_lo, 2, stride=2))
            self.decoder.append(ResBlock(2 * w_lo, w_lo))
        self.head = nn.Conv2d(widths[0], config.C, 1)
        self.classifier = (
            ClassificationBranch(widths[-1], config.cls_hidden, config.R, config.C - 1)
            if config.has_classifier else None
        )

    def forward(self, x) -> NetworkOutput:
        c = self.config
        if x.dim() != 4 or tuple(x.shape[1:]) != (c.S, c.H, c.W):
            raise ValueError(f"expected input [B, {c.S}, {c.H}, {c.W}], got {list(x.shape)}")
        skips = []
        for i, block in enumerate(self.encoder):
            if i:
                x = F.max_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        bottleneck = x
        for up, block, skip in zip(self.up, self.decoder, skips[-2::-1]):
            x = block(torch.cat([up(x), skip], dim=1))
        logits = self.head(x)

        if self.classifier is not None:
            region_logits, attention = self.classifier(bottleneck)
        else:
            region_logits = logits.new_zeros(logits.shape[0], c.R)
            attention = None
        return NetworkOutput(logits[:, :-1], logits[:, -1:], attention, region_logits)

    def segmentation_parameters(self):
        for name, p in self.named_parameters():
            if not name.startswith("classifier."):
                yield p

    def classifier_parameters(self):
        return [] if self.classifier is None else list(self.classifier.parameters())


def forward(model: SegmentationNet, batch_inputs) -> list[NetworkOutput]:
    out = model(torch.as_tensor(batch_inputs))
    return [out[i] for i in range(len(out))]


def attention_modulate(z5: torch.Tensor, z4: torch.Tensor, eps: float = ATTENTION_EPS) -> torch.Tensor:
    """Shift organ logits by the log of their attention weight.

    ``z5`` is ``[..., C-1, H, W]``, ``z4`` is ``[..., C-1]``; batched inputs
    broadcast over the leading axis.
    """
    shifted = z4 + eps
    if torch.any(shifted <= 0):
        raise ValueError("attention + eps must be positive")
    return torch.log(shifted)[..., None, None] + z5


def segmentation_probabilities(organ_logits: torch.Tensor, background_logit: torch.Tensor) -> torch.Tensor:
    """Softmax over ``[organs; background]`` along the channel axis."""
    return torch.softmax(torch.cat([organ_logits, background_logit], dim=-3), dim=-3)


def recalibrate(p: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Zero unannotated organ channels and hand their mass to background.

    ``p`` is ``[..., C, H, W]`` (background last), ``w`` is ``[..., C-1]``.
    """
    w = torch.as_tensor(w, dtype=p.dtype, device=p.device)
    if w.shape[-1] != p.shape[-3] - 1:
        raise ValueError(f"mask length {w.shape[-1]} does not match {p.shape[-3] - 1} organs")
    organs = p[..., :-1, :, :] * w[..., None, None]
    background = 1.0 - organs.sum(dim=-3, keepdim=True)
    return torch.cat([organs, background], dim=-3)


def predict_probabilities(model: SegmentationNet, inputs, attention: bool = True,
                          availability=None) -> torch.Tensor:
    """Full inference path: logits -> (attention) -> softmax -> (recalibration)."""
    out = model(inputs)
    z5 = out.organ_logits
    if attention and out.attention is not None:
        z5 = attention_modulate(z5, out.attention, model.config.attention_epsilon)
    p = segmentation_probabilities(z5, out.background_logit)
    if availability is not None:
        p = recalibrate(p, availability)
    return p


def parameter_counts(config: NetworkConfig) -> dict:
    model = SegmentationNet(config)
    seg = sum(p.numel() for p in model.segmentation_parameters())
    cls = sum(p.numel() for p in model.classifier_parameters())
    return {
        "total": seg + cls,
        "segmentation_only": seg,
        "classification_and_attention": cls,
        "overhead_ratio": cls / seg,
    }


def paper_network_config() -> NetworkConfig:
    return NetworkConfig(S=5, H=320, W=320, C=34, R=5, levels=4, base_width=32)


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(model: SegmentationNet, path, extra: dict | None = None) -> Path:
    """One torch archive: ``config`` JSON string plus the state dict."""
    path = Path(path)
    payload = {
        "config": json.dumps(model.config.to_dict(), sort_keys=True),
        "extra": json.dumps(extra or {}, sort_keys=True),
        "state_dict": model.state_dict(),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path) -> tuple[SegmentationNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    cfg = json.loads(payload["config"])
    model = SegmentationNet(NetworkConfig(**cfg))
    state = payload["state_dict"]
    model.to(next(iter(state.values())).dtype)
    model.load_state_dict(state)
    model.eval()
    return model, json.loads(payload["extra"])
