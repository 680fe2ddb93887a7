"""Heterogeneous local classifiers and the shared transposed-convolution decoder.

Local models are small CNN families of graduated depth that all emit a latent
vector of the same size ``p``. The latent is taken at the output of a 1x1
convolution on the stride-4 feature map and flattened, so ``p`` factors as
``latent_channels * (H/4) * (W/4)``; the decoder consumes exactly that shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError


@dataclass(frozen=True)
class DatasetProfile:
    name: str
    input_shape: Tuple[int, int, int]
    num_classes: int
    latent_shape: Tuple[int, int, int]
    decoder_channels: Tuple[int, int, int]
    base_width: int = 16

    @property
    def p(self) -> int:
        return math.prod(self.latent_shape)

    @property
    def d(self) -> int:
        return math.prod(self.input_shape)


PROFILES: Dict[str, DatasetProfile] = {
    "mnist": DatasetProfile("mnist", (1, 28, 28), 10, (20, 7, 7), (16, 32, 32)),
    "cifar10": DatasetProfile("cifar10", (3, 32, 32), 10, (64, 8, 8), (32, 64, 64), base_width=32),
    "cifar100": DatasetProfile("cifar100", (3, 32, 32), 100, (64, 8, 8), (32, 64, 64), base_width=32),
    "tinyimagenet": DatasetProfile("tinyimagenet", (3, 64, 64), 200, (128, 16, 16), (64, 64, 64), base_width=32),
    # fast profile for tests and smoke runs
    "tiny": DatasetProfile("tiny", (1, 16, 16), 10, (8, 4, 4), (8, 16, 16), base_width=8),
}


def get_profile(name: str) -> DatasetProfile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ConfigError(f"unknown dataset profile {name!r}; known: {sorted(PROFILES)}") from None


@dataclass(frozen=True)
class ArchCluster:
    cluster_id: int
    depth: int
    width_mult: float = 1.0


ZOO: Tuple[ArchCluster, ...] = tuple(ArchCluster(i + 1, depth) for i, depth in enumerate((2, 3, 4, 5, 6)))


def arch_clusters(n: int) -> Tuple[ArchCluster, ...]:
    if not 1 <= n <= len(ZOO):
        raise ConfigError(f"number of architecture clusters must be in 1..{len(ZOO)}, got {n}")
    return ZOO[:n]


def cluster_for_client(client_id: int, clusters: Sequence[ArchCluster]) -> ArchCluster:
    return clusters[client_id % len(clusters)]


def _check_latent(input_shape, latent_shape, p) -> None:
    if math.prod(latent_shape) != p:
        raise ConfigError(f"p={p} does not factor as latent shape {tuple(latent_shape)}")
    _, h, w = input_shape
    if latent_shape[1] * 4 != h or latent_shape[2] * 4 != w:
        raise ConfigError(
            f"latent spatial size {latent_shape[1:]} must be input spatial size {(h, w)} divided by 4"
        )


class LocalModel(nn.Module):
    """Classifier ``f = head o extractor``."""

    def __init__(self, extractor: nn.Module, head: nn.Module, arch_id: int):
        super().__init__()
        self.extractor = extractor
        self.head = head
        self.arch_id = arch_id

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.extractor(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.extractor(x))


def _make_extractor(arch: ArchCluster, input_shape, latent_shape, base_width: int) -> nn.Sequential:
    width = max(1, int(round(base_width * arch.width_mult)))
    in_ch = input_shape[0]
    layers = [nn.Conv2d(in_ch, width, 3, stride=2, padding=1), nn.ReLU()]
    layers += [nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.ReLU()]
    for _ in range(arch.depth - 2):
        layers += [nn.Conv2d(2 * width, 2 * width, 3, padding=1), nn.ReLU()]
    layers += [nn.Conv2d(2 * width, latent_shape[0], 1), nn.Flatten()]
    return nn.Sequential(*layers)


def build_local_model(
    arch: ArchCluster,
    input_shape: Sequence[int],
    p: int,
    num_classes: int,
    seed: int,
    latent_shape: Sequence[int] | None = None,
    base_width: int = 16,
) -> LocalModel:
    if arch.depth < 2:
        raise ConfigError(f"extractor depth must be >= 2, got {arch.depth}")
    input_shape = tuple(input_shape)
    if latent_shape is None:
        _, h, w = input_shape
        if p % ((h // 4) * (w // 4)):
            raise ConfigError(f"p={p} is not a multiple of the latent spatial size {(h // 4, w // 4)}")
        latent_shape = (p // ((h // 4) * (w // 4)), h // 4, w // 4)
    latent_shape = tuple(latent_shape)
    _check_latent(input_shape, latent_shape, p)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        extractor = _make_extractor(arch, input_shape, latent_shape, base_width)
        head = nn.Linear(p, num_classes)
    return LocalModel(extractor, head, arch.cluster_id)


def build_profile_model(profile: DatasetProfile, arch: ArchCluster, seed: int) -> LocalModel:
    return build_local_model(
        arch, profile.input_shape, profile.p, profile.num_classes, seed,
        latent_shape=profile.latent_shape, base_width=profile.base_width,
    )


class VtcDecoder(nn.Module):
    """Four transposed-convolution blocks; blocks 2 and 4 double the resolution."""

    def __init__(self, latent_shape, channels, out_channels: int):
        super().__init__()
        c0 = latent_shape[0]
        c1, c2, c3 = channels
        self.latent_shape = tuple(latent_shape)

        def block(cin, cout, kernel, stride, act):
            return nn.Sequential(
                nn.ConvTranspose2d(cin, cout, kernel, stride=stride, padding=1),
                nn.BatchNorm2d(cout),
                act,
            )

        self.blocks = nn.Sequential(
            block(c0, c1, 3, 1, nn.LeakyReLU(0.01)),
            block(c1, c2, 4, 2, nn.LeakyReLU(0.01)),
            block(c2, c3, 3, 1, nn.LeakyReLU(0.01)),
            block(c3, out_channels, 4, 2, nn.Sigmoid()),
        )

    @property
    def p(self) -> int:
        return math.prod(self.latent_shape)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return self.blocks(v.reshape(v.shape[0], *self.latent_shape))


def build_vtc_decoder(profile: DatasetProfile, p: int, seed: int) -> VtcDecoder:
    _check_latent(profile.input_shape, profile.latent_shape, p)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return VtcDecoder(profile.latent_shape, profile.decoder_channels, profile.input_shape[0])


def classification_loss(scores: torch.Tensor, y) -> torch.Tensor:
    """Cross-entropy; accepts a single score vector or a batch (mean reduction)."""
    y = torch.as_tensor(y, dtype=torch.long)
    num_classes = scores.shape[-1]
    if bool(((y < 0) | (y >= num_classes)).any()):
        raise ValueError(f"label out of range 0..{num_classes - 1}: {y.tolist()}")
    if scores.dim() == 1:
        return F.cross_entropy(scores.unsqueeze(0), y.reshape(1))
    return F.cross_entropy(scores, y)


@torch.no_grad()
def local_prototypes(model: LocalModel, x: torch.Tensor, y: torch.Tensor, batch_size: int = 512) -> Dict[int, torch.Tensor]:
    """Per-class mean of extractor outputs over the given samples."""
    sums: Dict[int, torch.Tensor] = {}
    counts: Dict[int, int] = {}
    for start in range(0, len(x), batch_size):
        feats = model.features(x[start:start + batch_size])
        labels = y[start:start + batch_size]
        for cls in torch.unique(labels).tolist():
            mask = labels == cls
            part = feats[mask].sum(dim=0)
            sums[cls] = sums[cls] + part if cls in sums else part
            counts[cls] = counts.get(cls, 0) + int(mask.sum())
    return {cls: sums[cls] / counts[cls] for cls in sorted(sums)}


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
