"""Tests for the domain-routed backbone."""

import pytest
import torch

from src.core.config import BackboneConfig
from src.models.backbone import Backbone, FeatureMapSet
from src.models.normalization import ALL_EXPERTS, INVARIANT


@pytest.fixture
def backbone_config() -> BackboneConfig:
    return BackboneConfig(height=16, width=8, stem_channels=4, channels=[4, 8], convs_per_stage=[1, 1], reduction=2)


def _warm_up(backbone: Backbone, images: torch.Tensor) -> None:
    """Move every expert's running statistics away from their initial values."""
    backbone.train()
    with torch.no_grad():
        for domain in range(backbone.num_domains):
            backbone(images + domain, domain)
    backbone.eval()


class TestBackbone:
    """Test suite for Backbone."""

    def test_default_stage_shapes(self):
        """Test the desk-scale configuration's stage maps."""
        config = BackboneConfig()
        backbone = Backbone(config, 3).eval()

        maps = backbone(torch.randn(2, 3, 96, 32), 0)

        assert config.stage_shapes() == [(32, 24, 8), (64, 12, 4)]
        assert [tuple(m.shape) for m in maps] == [(2, 32, 24, 8), (2, 64, 12, 4)]

    def test_wrong_resolution(self, backbone_config):
        """Test images of another size are rejected."""
        backbone = Backbone(backbone_config, 2)

        with pytest.raises(ValueError, match="Expected images"):
            backbone(torch.randn(2, 3, 32, 8), 0)

    def test_unknown_selector(self, backbone_config, images):
        """Test an expert index outside 0..K-1 is rejected."""
        backbone = Backbone(backbone_config, 2)

        with pytest.raises(ValueError, match="Unknown domain selector"):
            backbone(images, 2)

    def test_all_experts_equals_individual_experts(self, backbone_config, images):
        """Test the stacked pass matches one pass per expert in eval mode."""
        torch.manual_seed(0)
        backbone = Backbone(backbone_config, 3)
        _warm_up(backbone, images)

        with torch.no_grad():
            stacked = backbone.extract(images, ALL_EXPERTS)
            for domain, features in enumerate(stacked):
                single = backbone.extract(images, domain)
                assert features.domain == domain
                for a, b in zip(features.maps, single.maps):
                    assert torch.allclose(a, b, atol=1e-6)

    def test_single_domain_invariant_equals_expert(self, backbone_config, images):
        """Test K=1 invariant features coincide with the lone expert in eval mode."""
        torch.manual_seed(0)
        backbone = Backbone(backbone_config, 1)
        _warm_up(backbone, images)

        with torch.no_grad():
            invariant = backbone.extract(images, INVARIANT)
            expert = backbone.extract(images, 0)

        assert invariant.domain is None
        for a, b in zip(invariant.maps, expert.maps):
            assert torch.allclose(a, b, atol=1e-5)

    def test_deterministic_in_eval_mode(self, backbone_config, images):
        """Test the same input gives bit-identical maps."""
        torch.manual_seed(0)
        backbone = Backbone(backbone_config, 2).eval()

        with torch.no_grad():
            first = backbone(images, INVARIANT)
            second = backbone(images, INVARIANT)

        assert all(torch.equal(a, b) for a, b in zip(first, second))

    def test_expert_gradient_reaches_only_its_bank(self, backbone_config, images):
        """Test a backward pass through expert 1 leaves the other experts without gradients."""
        backbone = Backbone(backbone_config, 2).train()

        backbone(images, 1)[-1].sum().backward()

        block = backbone.stem
        assert block.conv.weight.grad is not None
        assert block.norm.dsbn.bns[1].weight.grad is not None
        assert block.norm.dsbn.bns[0].weight.grad is None
        assert block.norm.dabn.head.fc1.weight.grad is None


class TestFeatureMapSet:
    """Test suite for FeatureMapSet."""

    def test_increasing_sizes_rejected(self):
        """Test later stages may not be larger than earlier ones."""
        with pytest.raises(ValueError, match="non-increasing"):
            FeatureMapSet([torch.zeros(1, 2, 2, 2), torch.zeros(1, 2, 4, 2)])

    def test_concat_and_select(self):
        """Test concatenation along the batch axis and subsetting."""
        a = FeatureMapSet([torch.zeros(2, 3, 4, 2), torch.zeros(2, 5, 2, 1)], domain=1)
        b = FeatureMapSet([torch.ones(3, 3, 4, 2), torch.ones(3, 5, 2, 1)], domain=1)

        joined = FeatureMapSet.concat([a, b])

        assert joined.batch_size == 5
        assert joined.num_stages == 2
        assert torch.equal(joined.select(slice(2, 5)).maps[0], b.maps[0])

    def test_concat_mixed_domains_rejected(self):
        """Test sets from different routes cannot be joined."""
        a = FeatureMapSet([torch.zeros(1, 3, 2, 2)], domain=0)
        b = FeatureMapSet([torch.zeros(1, 3, 2, 2)], domain=None)

        with pytest.raises(ValueError, match="Cannot concatenate"):
            FeatureMapSet.concat([a, b])
