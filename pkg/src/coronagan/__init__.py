"""coronagan: structure-constrained unpaired OCT <-> histology translation.

Library layout:
  phantom     synthetic three-layer coronary samples in both domains
  dataset     patching, flip augmentation, unpaired batch loading
  networks    generators, discriminators, structure heads, checkpoints
  losses      adversarial / cycle / embedding / coronary terms
  training    Adam, lr schedule, alternating minmax loop, resume
  evaluation  perceptual-hash-value similarity scoring
  cli         the `coronagan` command line entry point
"""
from .losses import LossBreakdown, LossWeights
from .networks import DiscriminatorConfig, GeneratorConfig
from .phantom import Domain, PhantomDistribution, PhantomSpec
from .training import TrainingConfig

__version__ = "0.1.0"

__all__ = [
    "Domain",
    "DiscriminatorConfig",
    "GeneratorConfig",
    "LossBreakdown",
    "LossWeights",
    "PhantomDistribution",
    "PhantomSpec",
    "TrainingConfig",
    "__version__",
]
