"""2D U-Net (nnU-Net style) with deep supervision, SSL heads, checkpoints and weight transfer.

Tensor names are stable and their first component is the checkpoint group:

* ``encoder.stages.<i>.<j>.{conv,norm}.*``  encoder stage ``i``, conv block ``j``
* ``decoder.ups.<k>.*`` / ``decoder.blocks.<k>.<j>.*``  decoder level ``k`` (0 = deepest)
* ``output_heads.<s>.*``  1x1 output convolutions, ``s = 0`` is full resolution
* ``projection_head.*``  SimCLR / PCL MLP
* ``dino_head.*``  DINO MLP with weight-normalized last layer
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError, TransferError, ValidationError

GROUPS = ("encoder", "decoder", "output_heads", "projection_head", "dino_head")
METHODS = ("scratch", "simclr", "pcl", "dino", "mim")
POLICIES = {
    "encoder_only": ("encoder",),
    "encoder_decoder_no_output": ("encoder", "decoder"),
}
CHECKPOINT_FORMAT = "cinessp-checkpoint/1"


@dataclass
class UNetConfig:
    in_channels: int = 1
    n_classes: int = 4
    n_stages: int = 7
    base_features: int = 32
    feature_cap: int = 512
    convs_per_stage: int = 2
    deep_supervision: bool = True
    ds_scales: int = 4
    negative_slope: float = 0.01
    reconstruction: bool = False  # MIM variant: no deep supervision, one 1-channel output

    def __post_init__(self):
        if self.n_stages < 2:
            raise ValidationError("n_stages must be >= 2")
        if self.base_features < 1 or self.feature_cap < 1:
            raise ValidationError("feature counts must be positive")
        if self.ds_scales < 1:
            raise ValidationError("ds_scales must be >= 1")

    @property
    def features(self) -> list[int]:
        return [min(self.base_features * 2**i, self.feature_cap) for i in range(self.n_stages)]

    @property
    def divisor(self) -> int:
        return 2 ** (self.n_stages - 1)

    @property
    def n_outputs(self) -> int:
        if self.reconstruction or not self.deep_supervision:
            return 1
        return min(self.ds_scales, self.n_stages - 1)

    def backbone_digest(self) -> str:
        keys = ("in_channels", "n_stages", "base_features", "feature_cap", "convs_per_stage")
        return _digest({k: getattr(self, k) for k in keys})

    def to_dict(self) -> dict:
        return asdict(self)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


class ConvBlock(nn.Module):
    def __init__(self, cin, cout, stride=1, negative_slope=0.01):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.norm = nn.InstanceNorm2d(cout, affine=True, eps=1e-5)
        self.act = nn.LeakyReLU(negative_slope, inplace=True)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class Encoder(nn.Module):
    def __init__(self, config: UNetConfig):
        super().__init__()
        feats = config.features
        stages = []
        cin = config.in_channels
        for i, f in enumerate(feats):
            blocks = [ConvBlock(cin, f, stride=1 if i == 0 else 2, negative_slope=config.negative_slope)]
            blocks += [ConvBlock(f, f, negative_slope=config.negative_slope) for _ in range(config.convs_per_stage - 1)]
            stages.append(nn.Sequential(*blocks))
            cin = f
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        skips = []
        for stage in self.stages:
            x = stage(x)
            skips.append(x)
        return skips


class Decoder(nn.Module):
    def __init__(self, config: UNetConfig):
        super().__init__()
        feats = config.features
        ups, blocks = [], []
        for i in range(config.n_stages - 2, -1, -1):
            ups.append(nn.ConvTranspose2d(feats[i + 1], feats[i], 2, stride=2))
            level = [ConvBlock(2 * feats[i], feats[i], negative_slope=config.negative_slope)]
            level += [ConvBlock(feats[i], feats[i], negative_slope=config.negative_slope)
                      for _ in range(config.convs_per_stage - 1)]
            blocks.append(nn.Sequential(*level))
        self.ups = nn.ModuleList(ups)
        self.blocks = nn.ModuleList(blocks)

    def forward(self, skips):
        x = skips[-1]
        outs = []
        for k, (up, block) in enumerate(zip(self.ups, self.blocks)):
            skip = skips[-(k + 2)]
            x = block(torch.cat([up(x), skip], dim=1))
            outs.append(x)
        return outs  # deepest first, full resolution last


class UNet(nn.Module):
    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.decoder = Decoder(config)
        feats = config.features
        out_ch = 1 if config.reconstruction else config.n_classes
        # output_heads[s] reads decoder level at resolution 1 / 2**s
        self.output_heads = nn.ModuleList(nn.Conv2d(feats[s], out_ch, 1) for s in range(config.n_outputs))
        self.projection_head: nn.Module | None = None
        self.dino_head: nn.Module | None = None

    def check_input(self, x: torch.Tensor):
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected input (B, {self.config.in_channels}, H, W), got {tuple(x.shape)}")
        d = self.config.divisor
        h, w = x.shape[-2:]
        if h % d or w % d:
            raise ShapeError(f"input spatial dims ({h}, {w}) must be divisible by {d}")

    def forward(self, x):
        self.check_input(x)
        levels = self.decoder(self.encoder(x))
        outs = [head(levels[-(s + 1)]) for s, head in enumerate(self.output_heads)]
        if self.config.n_outputs == 1:
            return outs[0]
        return outs

    def segment(self, x):
        """Full-resolution logits only."""
        out = self.forward(x)
        return out[0] if isinstance(out, list) else out

    def embed(self, x):
        self.check_input(x)
        bottleneck = self.encoder(x)[-1]
        return bottleneck.mean(dim=(-2, -1))

    @property
    def embed_dim(self) -> int:
        return self.config.features[-1]


def _init_weights(module):
    # He init with the leaky slope, as nnU-Net does
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(m.weight, a=0.01)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def build_unet(config: UNetConfig | dict | None = None, seed: int = 0) -> UNet:
    if isinstance(config, dict):
        config = UNetConfig(**config)
    config = config or UNetConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = UNet(config)
        _init_weights(model)
    return model


def encoder_embed(model: UNet, batch: torch.Tensor) -> torch.Tensor:
    """Global-average-pooled bottleneck features, one vector per image."""
    return model.embed(batch)


class ProjectionHead(nn.Module):
    def __init__(self, in_dim, hidden_dim, out_dim):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(in_dim, hidden_dim), nn.ReLU(inplace=True), nn.Linear(hidden_dim, out_dim))

    def forward(self, x):
        return self.mlp(x)


class DINOHead(nn.Module):
    def __init__(self, in_dim, out_dim=8192, hidden_dim=2048, bottleneck_dim=256, norm_last_layer=True):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden_dim), nn.GELU(),
            nn.Linear(hidden_dim, hidden_dim), nn.GELU(),
            nn.Linear(hidden_dim, bottleneck_dim),
        )
        for m in self.mlp:
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
        last = nn.Linear(bottleneck_dim, out_dim, bias=False)
        self.last_layer = nn.utils.parametrizations.weight_norm(last)
        with torch.no_grad():
            self.last_layer.parametrizations.weight.original0.fill_(1.0)
        if norm_last_layer:
            self.last_layer.parametrizations.weight.original0.requires_grad = False

    def forward(self, x):
        x = self.mlp(x)
        x = F.normalize(x, dim=-1, p=2)
        return self.last_layer(x)


def attach_projection_head(model: UNet, out_dim=128, hidden_dim=512, seed=0) -> UNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed + 1)
        model.projection_head = ProjectionHead(model.embed_dim, hidden_dim, out_dim)
    return model


def attach_dino_head(model: UNet, out_dim=8192, hidden_dim=2048, bottleneck_dim=256, seed=0) -> UNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed + 2)
        model.dino_head = DINOHead(model.embed_dim, out_dim, hidden_dim, bottleneck_dim)
    return model


# ------------------------------------------------------------------ checkpoints


@dataclass
class Checkpoint:
    tensors: "OrderedDict[str, torch.Tensor]"
    meta: dict = field(default_factory=dict)
    unet_config: dict = field(default_factory=dict)
    head_config: dict = field(default_factory=dict)

    @property
    def groups(self) -> dict[str, "OrderedDict[str, torch.Tensor]"]:
        out: dict[str, OrderedDict] = {}
        for name, t in self.tensors.items():
            out.setdefault(name.split(".", 1)[0], OrderedDict())[name] = t
        return out

    @classmethod
    def from_model(cls, model: UNet, method: str, epoch: int, seed: int, extra: dict | None = None) -> "Checkpoint":
        if method not in METHODS:
            raise ValidationError(f"unknown method {method!r}")
        tensors = OrderedDict((k, v.detach().clone()) for k, v in model.state_dict().items())
        heads = {}
        if model.projection_head is not None:
            lin = [m for m in model.projection_head.mlp if isinstance(m, nn.Linear)]
            heads["projection_head"] = {"hidden_dim": lin[0].out_features, "out_dim": lin[-1].out_features}
        if model.dino_head is not None:
            lin = [m for m in model.dino_head.mlp if isinstance(m, nn.Linear)]
            heads["dino_head"] = {"hidden_dim": lin[0].out_features, "bottleneck_dim": lin[-1].out_features,
                                  "out_dim": model.dino_head.last_layer.out_features}
        meta = {
            "method": method,
            "epoch": int(epoch),
            "seed": int(seed),
            "config_digest": model.config.backbone_digest(),
        }
        meta.update(extra or {})
        return cls(tensors=tensors, meta=meta, unet_config=model.config.to_dict(), head_config=heads)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "format": CHECKPOINT_FORMAT,
            "meta": json.dumps({"meta": self.meta, "unet_config": self.unet_config, "head_config": self.head_config},
                               sort_keys=True),
            "tensors": OrderedDict(self.tensors),
        }
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        os.close(fd)
        try:
            torch.save(payload, tmp)
            os.replace(tmp, path)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        payload = torch.load(str(path), map_location="cpu", weights_only=True)
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise ValidationError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        block = json.loads(payload["meta"])
        return cls(tensors=OrderedDict(payload["tensors"]), meta=block["meta"],
                   unet_config=block["unet_config"], head_config=block.get("head_config", {}))

    def build_model(self) -> UNet:
        """Rebuild the producing architecture (heads included) and load the weights."""
        model = build_unet(UNetConfig(**self.unet_config), seed=0)
        if "projection_head" in self.head_config:
            attach_projection_head(model, **self.head_config["projection_head"])
        if "dino_head" in self.head_config:
            attach_dino_head(model, **self.head_config["dino_head"])
        model.load_state_dict(self.tensors)
        return model

    def summary(self) -> str:
        lines = [f"format: {CHECKPOINT_FORMAT}", f"meta: {json.dumps(self.meta, sort_keys=True)}",
                 f"unet_config: {json.dumps(self.unet_config, sort_keys=True)}"]
        for group, tensors in self.groups.items():
            n = sum(t.numel() for t in tensors.values())
            lines.append(f"[{group}] {len(tensors)} tensors, {n} values")
            for name, t in tensors.items():
                lines.append(f"  {name} {tuple(t.shape)} {str(t.dtype).replace('torch.', '')}")
        return "\n".join(lines)


@dataclass
class TransferReport:
    policy: str
    transferred: list[str]
    initialized: list[str]

    @property
    def n_transferred(self) -> int:
        return len(self.transferred)

    @property
    def n_initialized(self) -> int:
        return len(self.initialized)

    def to_dict(self) -> dict:
        return {"policy": self.policy, "transferred": self.transferred, "initialized": self.initialized,
                "n_transferred": self.n_transferred, "n_initialized": self.n_initialized}


def transfer_weights(source: Checkpoint, target_model: UNet, policy: str) -> TransferReport:
    """Copy the policy's groups from ``source`` into ``target_model`` in place.

    Tensors outside those groups keep whatever the target was built with
    (normally a fresh seeded initialization).
    """
    if policy not in POLICIES:
        raise ValidationError(f"unknown transfer policy {policy!r}; choose from {sorted(POLICIES)}")
    groups = POLICIES[policy]
    target_state = target_model.state_dict()
    transferred, initialized = [], []
    updates = {}
    for name, tensor in target_state.items():
        if name.split(".", 1)[0] in groups:
            if name not in source.tensors:
                raise TransferError(f"checkpoint lacks tensor {name}")
            src = source.tensors[name]
            if src.shape != tensor.shape:
                raise TransferError(f"shape mismatch for {name}: checkpoint {tuple(src.shape)} vs model {tuple(tensor.shape)}")
            updates[name] = src.clone()
            transferred.append(name)
        else:
            initialized.append(name)
    # metadata must agree too, not just the tensor shapes
    src_digest = source.meta.get("config_digest")
    if src_digest is not None and src_digest != target_model.config.backbone_digest():
        raise TransferError(f"backbone mismatch: checkpoint {src_digest} vs target {target_model.config.backbone_digest()}")
    target_model.load_state_dict(updates, strict=False)
    return TransferReport(policy=policy, transferred=transferred, initialized=initialized)
