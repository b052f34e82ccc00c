"""Non-diffusive translation branch: the cycle pass that manufactures
pseudo-pairs from unpaired clean/rainy images, and the cycle-consistency
loss that ties the reconstructions back to their sources.

There is no discriminator anywhere: the generators are supervised only
by the cycle loss and by the gradients flowing back from the diffusion
noise-matching terms in the trainer. Both generators are training-time
machinery; inference never touches them.
"""

from dataclasses import dataclass

from . import models
from . import ndcore as nd
from .ndcore import Tensor


@dataclass
class CycleOutputs:
    """x_prime: generated rainy, x_dprime: reconstructed clean,
    y_prime: generated clean, y_dprime: reconstructed rainy."""

    x_prime: Tensor
    x_dprime: Tensor
    y_prime: Tensor
    y_dprime: Tensor


def cycle_pass(phiA, phiB, x: Tensor, y: Tensor, gen_fn=models.generate) -> CycleOutputs:
    """Run both translation cycles:

        x' = G_A(x),  x'' = G_B(x')     (clean -> rainy -> clean)
        y' = G_B(y),  y'' = G_A(y')     (rainy -> clean -> rainy)

    x and y may differ in size. `gen_fn(params, img)` is injectable so
    tests can substitute contrived generators.
    """
    x_prime = gen_fn(phiA, x)
    x_dprime = gen_fn(phiB, x_prime)
    y_prime = gen_fn(phiB, y)
    y_dprime = gen_fn(phiA, y_prime)
    return CycleOutputs(x_prime, x_dprime, y_prime, y_dprime)


def cycle_loss(x: Tensor, x_dprime: Tensor, y: Tensor, y_dprime: Tensor) -> Tensor:
    """mean|x'' - x| + mean|y'' - y|, each mean over all pixels and channels."""
    return nd.add(
        nd.mean_absolute_error(x_dprime, x),
        nd.mean_absolute_error(y_dprime, y),
    )
