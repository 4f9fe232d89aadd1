"""Domain-specific and domain-adaptive batch normalization."""

import math
from typing import Literal

import torch
import torch.nn.functional as F
from structlog import get_logger
from torch import Tensor, nn

logger = get_logger()

ALL_EXPERTS = "all"
INVARIANT = "invariant"

# Expert index, every expert at once, or the domain-invariant route
DomainSelector = int | Literal["all", "invariant"]
BNMode = Literal["train", "eval"]


def _check_channels(x: Tensor, num_features: int) -> None:
    if x.dim() != 4:
        raise ValueError(f"Expected a [B, C, H, W] feature map, got shape {tuple(x.shape)}")
    if x.shape[1] != num_features:
        raise ValueError(f"Channel mismatch: input has {x.shape[1]}, layer expects {num_features}")


class DomainSpecificBatchNorm(nn.Module):
    """K independent BN parameter sets (gamma_i, beta_i, mu_i, sigma_i^2) over shared channels."""

    def __init__(
        self, num_features: int, num_domains: int, momentum: float = 0.1, eps: float = 1e-5
    ) -> None:
        super().__init__()
        if num_domains < 1:
            raise ValueError(f"num_domains must be >= 1, got {num_domains}")
        self.num_features = num_features
        self.num_domains = num_domains
        self.eps = eps
        self.bns = nn.ModuleList(
            nn.BatchNorm2d(num_features, eps=eps, momentum=momentum) for _ in range(num_domains)
        )

    def _check_domain(self, domain: int) -> None:
        if not isinstance(domain, int) or not 0 <= domain < self.num_domains:
            raise ValueError(f"Invalid domain index {domain!r} for {self.num_domains} domains")

    def normalize(self, x: Tensor, domain: int, mode: BNMode) -> Tensor:
        """Normalize with domain ``domain``'s parameters.

        ``train`` uses batch statistics and updates the domain's running
        statistics by momentum; ``eval`` uses the stored running statistics.
        """
        _check_channels(x, self.num_features)
        self._check_domain(domain)
        bn = self.bns[domain]
        return F.batch_norm(
            x,
            bn.running_mean,
            bn.running_var,
            bn.weight,
            bn.bias,
            training=mode == "train",
            momentum=bn.momentum,
            eps=bn.eps,
        )

    def frozen_normalize(self, x: Tensor, domain: int) -> Tensor:
        """Eval-style normalization with gradients stopped before the bank's parameters."""
        _check_channels(x, self.num_features)
        self._check_domain(domain)
        bn = self.bns[domain]
        return F.batch_norm(
            x,
            bn.running_mean,
            bn.running_var,
            bn.weight.detach(),
            bn.bias.detach(),
            training=False,
            eps=bn.eps,
        )

    def forward(self, x: Tensor, domain: int) -> Tensor:
        return self.normalize(x, domain, "train" if self.training else "eval")


class DomainMixingHead(nn.Module):
    """Predicts per-sample domain weights from globally pooled features.

    alpha = softmax(W2 relu(W1 avgpool(x)))
    """

    def __init__(self, num_features: int, num_domains: int, reduction: int = 16) -> None:
        super().__init__()
        self.num_features = num_features
        self.num_domains = num_domains
        hidden = max(1, math.ceil(num_features / reduction))
        self.fc1 = nn.Linear(num_features, hidden)
        self.fc2 = nn.Linear(hidden, num_domains)

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.num_features)
        pooled = x.mean(dim=(2, 3))
        return F.softmax(self.fc2(F.relu(self.fc1(pooled))), dim=1)


def mix_domain_outputs(x: Tensor, bank: DomainSpecificBatchNorm, alpha: Tensor) -> Tensor:
    """Convex combination of the bank's frozen per-domain outputs with weights ``alpha`` [B, K]."""
    if alpha.shape != (x.shape[0], bank.num_domains):
        raise ValueError(
            f"alpha must have shape {(x.shape[0], bank.num_domains)}, got {tuple(alpha.shape)}"
        )
    outputs = torch.stack(
        [bank.frozen_normalize(x, i) for i in range(bank.num_domains)], dim=1
    )  # [B, K, C, H, W]
    return (alpha[:, :, None, None, None] * outputs).sum(dim=1)


class DomainAdaptiveBatchNorm(nn.Module):
    """Mixes the K DSBN outputs of a co-located bank with input-conditioned weights.

    Each DSBN branch normalizes with its stored running statistics, and
    gradients stop before the bank, so training only moves ``head``.
    """

    def __init__(self, bank: DomainSpecificBatchNorm, reduction: int = 16) -> None:
        super().__init__()
        self.head = DomainMixingHead(bank.num_features, bank.num_domains, reduction)

    def weights(self, x: Tensor) -> Tensor:
        return self.head(x)

    def forward(self, x: Tensor, bank: DomainSpecificBatchNorm) -> Tensor:
        return mix_domain_outputs(x, bank, self.weights(x))


class DomainNorm2d(nn.Module):
    """One normalization site of the backbone.

    Routes a feature map through expert ``i``'s DSBN, through every expert
    (input is the K-fold stacked batch), or through the invariant route
    selected by ``mode``: DABN (adaptive), a uniform mixture (average) or a
    single vanilla BN trained on hybrid data (plain). ``per-domain`` sites
    have no invariant route.
    """

    def __init__(
        self,
        num_features: int,
        num_domains: int,
        mode: str = "adaptive",
        reduction: int = 16,
        momentum: float = 0.1,
        eps: float = 1e-5,
    ) -> None:
        super().__init__()
        self.mode = mode
        self.num_features = num_features
        self.num_domains = num_domains
        self.dsbn = DomainSpecificBatchNorm(num_features, num_domains, momentum, eps)
        self.dabn = DomainAdaptiveBatchNorm(self.dsbn, reduction) if mode == "adaptive" else None
        self.plain = (
            nn.BatchNorm2d(num_features, eps=eps, momentum=momentum) if mode == "plain" else None
        )

    def invariant(self, x: Tensor) -> Tensor:
        if self.mode == "adaptive":
            return self.dabn(x, self.dsbn)
        if self.mode == "average":
            uniform = x.new_full((x.shape[0], self.num_domains), 1.0 / self.num_domains)
            return mix_domain_outputs(x, self.dsbn, uniform)
        if self.mode == "plain":
            return self.plain(x)
        raise ValueError(f"Normalization mode {self.mode!r} has no domain-invariant route")

    def all_experts(self, x: Tensor) -> Tensor:
        """``x`` is K equal-size chunks stacked on the batch axis; chunk i goes through expert i."""
        if x.shape[0] % self.num_domains:
            raise ValueError(
                f"Batch of {x.shape[0]} cannot be split across {self.num_domains} experts"
            )
        chunks = x.chunk(self.num_domains, dim=0)
        return torch.cat([self.dsbn.normalize(c, i, "eval") for i, c in enumerate(chunks)], dim=0)

    def forward(self, x: Tensor, selector: DomainSelector) -> Tensor:
        if selector == ALL_EXPERTS:
            return self.all_experts(x)
        if selector == INVARIANT:
            return self.invariant(x)
        return self.dsbn(x, selector)
