"""distillkit: contrastive representation distillation with closed-form
baselines, a mutual-information bound laboratory, and a desk-scale
benchmark harness."""

from . import analysis, baselines, core, crd, errors, harness, membank, milab

__version__ = "0.1.0"

__all__ = ["analysis", "baselines", "core", "crd", "errors", "harness",
           "membank", "milab", "__version__"]
