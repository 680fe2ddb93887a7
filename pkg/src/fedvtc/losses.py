"""Loss terms and the latent sampling rule used to train the VTC decoder.

Every reduction over a minibatch follows the class-grouped convention: samples
are bucketed by label, each bucket is averaged, and the bucket means are summed.
Classes absent from a batch contribute nothing.

All functions are pure; randomness enters only through the ``noise`` tensor
passed to :func:`reparameterize`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import torch

from .errors import MissingPrototypeError

SIGMA_MIN = 1e-6


@dataclass
class LossBreakdown:
    reconstruction: torch.Tensor
    kl: torch.Tensor
    dm: torch.Tensor
    total: torch.Tensor
    lam: float = 0.0

    def as_floats(self) -> dict:
        return {
            "reconstruction": float(self.reconstruction.detach()),
            "kl": float(self.kl.detach()),
            "dm": float(self.dm.detach()),
            "total": float(self.total.detach()),
        }


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def reconstruction_loss(x_gen: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Squared Euclidean distance summed over every element."""
    _check_same_shape(x_gen, x, "reconstruction_loss")
    return ((x_gen - x) ** 2).sum()


def _per_sample_sq_dist(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return ((a - b) ** 2).reshape(a.shape[0], -1).sum(dim=1)


def kl_gaussian(z: torch.Tensor, c: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """KL( N(z, diag(sigma^2)) || N(c, I) ).

    ``z`` and ``c`` may carry leading batch dimensions; the last dimension is
    the latent size ``p``. Returns one value per leading index.
    """
    if z.shape[-1] != sigma.shape[-1] or c.shape[-1] != sigma.shape[-1]:
        raise ValueError(
            f"kl_gaussian: latent sizes differ (z={z.shape[-1]}, c={c.shape[-1]}, sigma={sigma.shape[-1]})"
        )
    if bool((sigma <= 0).any()):
        raise ValueError("kl_gaussian: sigma must be strictly positive")
    p = sigma.shape[-1]
    floored = sigma.clamp_min(SIGMA_MIN)
    mean_term = ((z - c) ** 2).sum(dim=-1)
    trace = (sigma**2).sum()
    log_det = 2.0 * torch.log(floored).sum()
    return 0.5 * (mean_term + trace - p - log_det)


def reparameterize(z: torch.Tensor, sigma: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    if z.shape[-1] != sigma.shape[-1]:
        raise ValueError(f"reparameterize: sigma length {sigma.shape[-1]} != latent size {z.shape[-1]}")
    _check_same_shape(z, noise, "reparameterize")
    return z + sigma * noise


def _stack_prototypes(labels: torch.Tensor, prototypes: Mapping[int, torch.Tensor]) -> torch.Tensor:
    rows = []
    for y in labels.tolist():
        if y not in prototypes:
            raise MissingPrototypeError(y)
        rows.append(prototypes[y])
    return torch.stack(rows)


def _class_grouped_sum(values: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Sum over classes of the per-class mean of ``values``."""
    total = values.new_zeros(())
    for y in torch.unique(labels):
        total = total + values[labels == y].mean()
    return total


def elbo_loss(
    x: torch.Tensor,
    z: torch.Tensor,
    x_gen: torch.Tensor,
    labels: torch.Tensor,
    prototypes: Mapping[int, torch.Tensor],
    sigma: torch.Tensor,
) -> LossBreakdown:
    """Negative ELBO: class-grouped mean of reconstruction + latent KL."""
    _check_same_shape(x_gen, x, "elbo_loss")
    centers = _stack_prototypes(labels, prototypes).to(z.dtype)
    rec = _class_grouped_sum(_per_sample_sq_dist(x_gen, x), labels)
    kl = _class_grouped_sum(kl_gaussian(z, centers, sigma), labels)
    return LossBreakdown(reconstruction=rec, kl=kl, dm=rec.new_zeros(()), total=rec + kl)


def dm_loss(
    latent_of_generated: torch.Tensor,
    labels: torch.Tensor,
    prototypes: Mapping[int, torch.Tensor],
) -> torch.Tensor:
    """Distribution matching: class-grouped mean squared distance of re-extracted
    latents to their class prototype."""
    centers = _stack_prototypes(labels, prototypes).to(latent_of_generated.dtype)
    return _class_grouped_sum(_per_sample_sq_dist(latent_of_generated, centers), labels)


def vtc_loss(elbo: LossBreakdown, dm: torch.Tensor, lam: float) -> LossBreakdown:
    if lam < 0:
        raise ValueError(f"vtc_loss: lambda must be nonnegative, got {lam}")
    dm = torch.as_tensor(dm, dtype=elbo.total.dtype)
    base = elbo.reconstruction + elbo.kl
    return LossBreakdown(
        reconstruction=elbo.reconstruction,
        kl=elbo.kl,
        dm=dm,
        total=base + lam * dm,
        lam=lam,
    )
