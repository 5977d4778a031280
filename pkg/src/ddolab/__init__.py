"""Discriminator-style finetuning of likelihood models at exactly checkable scale.

Subpackages and modules:

* ``grad`` - reverse-mode autodiff over float64 arrays
* ``models`` - categorical, autoregressive and toy diffusion models, checkpoints
* ``ddo`` - the implicit-discriminator objectives and the tilted optimum
* ``selfplay`` - multi-round reference/target refinement
* ``metrics`` - divergences, bound checks, guidance composition, histogram KL
* ``data`` - seeded synthetic targets
* ``cli`` - the ``ddolab`` command
"""
from . import grad
from .ddo import DdoHyperParams, alpha_star, tilted_target
from .models import CategoricalDistribution, CategoricalModel, load_model, save_model

__version__ = "0.1.0"

__all__ = ["grad", "DdoHyperParams", "alpha_star", "tilted_target", "CategoricalDistribution",
           "CategoricalModel", "load_model", "save_model", "__version__"]
