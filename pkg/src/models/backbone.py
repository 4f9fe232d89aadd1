"""Small configurable CNN whose normalization sites are domain-routed."""

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from structlog import get_logger
from torch import Tensor, nn

from src.core.config import BackboneConfig

from .normalization import ALL_EXPERTS, INVARIANT, DomainNorm2d, DomainSelector

logger = get_logger()


@dataclass
class FeatureMapSet:
    """Per-stage feature maps of one image batch.

    ``domain`` is the expert index that produced the maps, or None for
    the domain-invariant stream.
    """

    maps: list[Tensor]
    domain: int | None = None

    def __post_init__(self) -> None:
        sizes = [m.shape[-2:] for m in self.maps]
        for prev, cur in zip(sizes, sizes[1:]):
            if cur[0] > prev[0] or cur[1] > prev[1]:
                raise ValueError(f"Stage spatial sizes must be non-increasing, got {sizes}")

    @property
    def num_stages(self) -> int:
        return len(self.maps)

    @property
    def batch_size(self) -> int:
        return self.maps[0].shape[0]

    def select(self, index: Tensor | slice | list[int]) -> "FeatureMapSet":
        """Subset of images, same stages."""
        return FeatureMapSet([m[index] for m in self.maps], self.domain)

    def detach(self) -> "FeatureMapSet":
        return FeatureMapSet([m.detach() for m in self.maps], self.domain)

    @staticmethod
    def concat(sets: list["FeatureMapSet"]) -> "FeatureMapSet":
        """Concatenate along the batch axis; all sets must come from the same route."""
        domains = {s.domain for s in sets}
        if len(domains) != 1:
            raise ValueError(f"Cannot concatenate feature maps from domains {domains}")
        stages = zip(*(s.maps for s in sets))
        return FeatureMapSet([torch.cat(maps, dim=0) for maps in stages], sets[0].domain)


class ConvNormBlock(nn.Module):
    """3x3 conv (no bias) -> domain-routed normalization -> ReLU."""

    def __init__(
        self, in_channels: int, out_channels: int, stride: int, num_domains: int, config: BackboneConfig
    ) -> None:
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.norm = DomainNorm2d(
            out_channels,
            num_domains,
            mode=config.norm_mode,
            reduction=config.reduction,
            momentum=config.bn_momentum,
            eps=config.bn_eps,
        )

    def forward(self, x: Tensor, selector: DomainSelector) -> Tensor:
        return F.relu(self.norm(self.conv(x), selector))


class Backbone(nn.Module):
    """Shared convolutions with K expert normalizations and an invariant route.

    Stage outputs are the tap points consumed by the matchers.
    """

    def __init__(self, config: BackboneConfig, num_domains: int) -> None:
        super().__init__()
        if num_domains < 1:
            raise ValueError(f"num_domains must be >= 1, got {num_domains}")
        self.config = config
        self.num_domains = num_domains
        self.stem = ConvNormBlock(3, config.stem_channels, config.stem_stride, num_domains, config)
        stages = []
        in_channels = config.stem_channels
        for out_channels, stride, depth in zip(
            config.channels, config.strides, config.convs_per_stage
        ):
            blocks = [ConvNormBlock(in_channels, out_channels, stride, num_domains, config)]
            blocks += [
                ConvNormBlock(out_channels, out_channels, 1, num_domains, config)
                for _ in range(depth - 1)
            ]
            stages.append(nn.ModuleList(blocks))
            in_channels = out_channels
        self.stages = nn.ModuleList(stages)
        self._init_weights()

    def _init_weights(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def blocks(self) -> list[ConvNormBlock]:
        return [self.stem] + [block for stage in self.stages for block in stage]

    def stage_shapes(self) -> list[tuple[int, int, int]]:
        return self.config.stage_shapes()

    def _check_input(self, images: Tensor) -> None:
        expected = (3, self.config.height, self.config.width)
        if images.dim() != 4 or tuple(images.shape[1:]) != expected:
            raise ValueError(
                f"Expected images of shape [B, {expected[0]}, {expected[1]}, {expected[2]}], "
                f"got {tuple(images.shape)}"
            )

    def forward(self, images: Tensor, selector: DomainSelector) -> list[Tensor]:
        """Stage maps for the given route; for ALL_EXPERTS maps are K-fold stacked on the batch axis."""
        self._check_input(images)
        if selector not in (ALL_EXPERTS, INVARIANT) and not (
            isinstance(selector, int) and 0 <= selector < self.num_domains
        ):
            raise ValueError(f"Unknown domain selector {selector!r} for {self.num_domains} domains")

        x = self.stem.conv(images)
        if selector == ALL_EXPERTS:
            # One convolution pass; every expert sees identical pre-normalization activations
            x = x.repeat(self.num_domains, 1, 1, 1)
        x = F.relu(self.stem.norm(x, selector))

        maps = []
        for stage in self.stages:
            for block in stage:
                x = block(x, selector)
            maps.append(x)
        return maps

    def extract(
        self, images: Tensor, selector: DomainSelector
    ) -> FeatureMapSet | list[FeatureMapSet]:
        """Feature maps through expert i, through every expert, or through the invariant route.

        Returns a single FeatureMapSet, or K of them for ``ALL_EXPERTS``.
        """
        maps = self(images, selector)
        if selector == ALL_EXPERTS:
            per_expert = zip(*(m.chunk(self.num_domains, dim=0) for m in maps))
            return [FeatureMapSet(list(expert_maps), i) for i, expert_maps in enumerate(per_expert)]
        return FeatureMapSet(maps, None if selector == INVARIANT else selector)
