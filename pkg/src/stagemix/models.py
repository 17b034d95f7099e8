"""Backbones with a stride-16 contract, stage heads, and descriptor assembly."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import BACKBONE_STRIDE, Config, config_from_dict, config_to_dict
from .errors import ShapeMismatch, StageCountMismatch

CHECKPOINT_VERSION = 1


def weights_init_kaiming(m: nn.Module) -> None:
    if isinstance(m, (nn.Conv2d, nn.Linear)):
        nn.init.kaiming_normal_(m.weight, a=0, mode="fan_out")
        if m.bias is not None:
            nn.init.constant_(m.bias, 0.0)
    elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm1d)):
        nn.init.constant_(m.weight, 1.0)
        nn.init.constant_(m.bias, 0.0)


class ToyBackbone(nn.Module):
    """Four stride-2 conv blocks (~100k parameters), overall stride 16."""

    out_channels = 128

    def __init__(self):
        super().__init__()
        channels = (3, 16, 32, 64, self.out_channels)
        blocks = []
        for cin, cout in zip(channels[:-1], channels[1:]):
            blocks += [nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False),
                       nn.BatchNorm2d(cout),
                       nn.ReLU(inplace=True)]
        self.features = nn.Sequential(*blocks)
        self.apply(weights_init_kaiming)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x)


class ResNet50Backbone(nn.Module):
    """torchvision ResNet-50 trunk with the last down-sample stride set to 1.

    Overall stride becomes 16, so a 384x128 input yields a 24x8 feature map.
    Weights are random unless a state-dict file is supplied.
    """

    out_channels = 2048

    def __init__(self, weights_file: str = ""):
        super().__init__()
        from torchvision.models import resnet50
        net = resnet50(weights=None)
        net.layer4[0].conv2.stride = (1, 1)
        net.layer4[0].downsample[0].stride = (1, 1)
        if weights_file:
            state = torch.load(weights_file, map_location="cpu")
            state = {k: v for k, v in state.items() if not k.startswith("fc.")}
            own = net.state_dict()
            for key, value in state.items():
                if key in own and own[key].shape != value.shape:
                    raise ShapeMismatch(
                        f"pretrained weight {key}: file shape {tuple(value.shape)} "
                        f"vs model shape {tuple(own[key].shape)}")
            net.load_state_dict(state, strict=False)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1 = net.layer1
        self.layer2 = net.layer2
        self.layer3 = net.layer3
        self.layer4 = net.layer4

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.stem(x)
        x = self.layer1(x)
        x = self.layer2(x)
        x = self.layer3(x)
        return self.layer4(x)


class StageHead(nn.Module):
    """Pooling, 1x1 conv reduction block, and a linear classifier.

    The first stage pools with GAP, later stages with GMP to strengthen the
    relatively weak responses that survive the mixing.
    """

    def __init__(self, in_channels: int, embed_dim: int, num_classes: int,
                 pooling: str):
        super().__init__()
        if pooling not in ("gap", "gmp"):
            raise ValueError(f"pooling must be gap or gmp, got {pooling!r}")
        self.pooling = pooling
        self.pool = (nn.AdaptiveAvgPool2d(1) if pooling == "gap"
                     else nn.AdaptiveMaxPool2d(1))
        self.reduction = nn.Sequential(
            nn.Conv2d(in_channels, embed_dim, 1, bias=False),
            nn.BatchNorm2d(embed_dim),
            nn.ReLU(inplace=True),
        )
        self.classifier = nn.Linear(embed_dim, num_classes)
        self.reduction.apply(weights_init_kaiming)
        weights_init_kaiming(self.classifier)

    def forward(self, fmap: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if fmap.shape[1] != self.reduction[0].in_channels:
            raise ShapeMismatch(
                f"stage head expects {self.reduction[0].in_channels} channels, "
                f"got {fmap.shape[1]}")
        embedding = self.reduction(self.pool(fmap)).flatten(1)
        logits = self.classifier(embedding)
        return embedding, logits


@dataclass
class StageOutput:
    stage_index: int
    embedding: torch.Tensor    # N, embed_dim
    logits: torch.Tensor       # N, num_classes
    stage_input: torch.Tensor  # N, C, H, W as consumed by the head


class MultiStageNet(nn.Module):
    """Shared backbone plus a sequence of stage heads."""

    def __init__(self, backbone: nn.Module, num_classes: int, num_stages: int = 3,
                 embed_dim: int = 512, normalize_embeddings: bool = False,
                 block_hw: tuple[int, int] | None = None):
        super().__init__()
        self.backbone = backbone
        self.num_stages = num_stages
        self.embed_dim = embed_dim
        self.num_classes = num_classes
        self.normalize_embeddings = normalize_embeddings
        self.block_hw = block_hw
        self.heads = nn.ModuleList([
            StageHead(backbone.out_channels, embed_dim, num_classes,
                      pooling="gap" if t == 0 else "gmp")
            for t in range(num_stages)
        ])

    def backbone_forward(self, images: torch.Tensor) -> torch.Tensor:
        h, w = images.shape[-2:]
        if h % BACKBONE_STRIDE or w % BACKBONE_STRIDE:
            raise ShapeMismatch(
                f"input {h}x{w} is not divisible by the backbone stride "
                f"{BACKBONE_STRIDE}")
        fmap = self.backbone(images)
        fh, fw = fmap.shape[-2:]
        if (fh, fw) != (h // BACKBONE_STRIDE, w // BACKBONE_STRIDE):
            raise ShapeMismatch(
                f"backbone produced {fh}x{fw}, expected "
                f"{h // BACKBONE_STRIDE}x{w // BACKBONE_STRIDE}")
        if self.block_hw is not None:
            bh, bw = self.block_hw
            if fh % bh or fw % bw:
                raise ShapeMismatch(
                    f"feature map {fh}x{fw} is not divisible by blocks {bh}x{bw}")
        return fmap

    def stage_forward(self, t: int, fmap: torch.Tensor) -> StageOutput:
        embedding, logits = self.heads[t](fmap)
        return StageOutput(stage_index=t, embedding=embedding, logits=logits,
                           stage_input=fmap)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """Evaluation-path forward: no mixing, returns the concatenated descriptor."""
        fmap = self.backbone_forward(images)
        outputs = [self.stage_forward(t, fmap) for t in range(self.num_stages)]
        return assemble_descriptor(outputs, self.num_stages, self.normalize_embeddings)


def assemble_descriptor(outputs: list[StageOutput], num_stages: int,
                        normalize: bool = False) -> torch.Tensor:
    if len(outputs) != num_stages:
        raise StageCountMismatch(
            f"expected {num_stages} stage outputs, got {len(outputs)}")
    embeddings = [o.embedding for o in sorted(outputs, key=lambda o: o.stage_index)]
    if normalize:
        embeddings = [F.normalize(e, p=2, dim=1) for e in embeddings]
    return torch.cat(embeddings, dim=1)


def build_model(cfg: Config, num_classes: int) -> MultiStageNet:
    if cfg.model.backbone == "toy":
        backbone: nn.Module = ToyBackbone()
    else:
        backbone = ResNet50Backbone(cfg.model.pretrained_weights)
    return MultiStageNet(
        backbone, num_classes,
        num_stages=cfg.model.stages,
        embed_dim=cfg.model.embed_dim,
        normalize_embeddings=cfg.model.normalize_embeddings,
        block_hw=(cfg.mix.block_h, cfg.mix.block_w),
    )


def save_checkpoint(path, model: MultiStageNet, cfg: Config, num_classes: int,
                    extra: dict | None = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": config_to_dict(cfg),
        "num_classes": num_classes,
        "model_state": model.state_dict(),
    }
    if extra:
        payload.update(extra)
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ShapeMismatch(
            f"unsupported checkpoint version {payload.get('version')!r}")
    return payload


def model_from_checkpoint(payload: dict,
                          cfg: Config | None = None) -> tuple[MultiStageNet, Config]:
    """Rebuild the model; fails closed on any parameter shape disagreement."""
    cfg = cfg if cfg is not None else config_from_dict(payload["config"])
    model = build_model(cfg, payload["num_classes"])
    own = model.state_dict()
    state = payload["model_state"]
    if set(own) != set(state):
        missing = sorted(set(own) ^ set(state))
        raise ShapeMismatch(f"checkpoint parameter names do not match: {missing[:4]}")
    for key, value in state.items():
        if own[key].shape != value.shape:
            raise ShapeMismatch(
                f"checkpoint {key}: shape {tuple(value.shape)} vs model "
                f"{tuple(own[key].shape)}")
    model.load_state_dict(state)
    return model, cfg
