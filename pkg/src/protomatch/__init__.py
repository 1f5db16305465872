"""Semi-supervised multi-domain training with trial-grouped mixup,
prototype pairwise losses, and adversarial feature alignment."""

from . import adaptation, augment, cli, datamodel, diffkernel, pairwise, trainer

__version__ = "0.1.0"

__all__ = [
    "adaptation",
    "augment",
    "cli",
    "datamodel",
    "diffkernel",
    "pairwise",
    "trainer",
    "__version__",
]
