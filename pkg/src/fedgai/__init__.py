"""Federated style fusion for lightweight image-to-sketch GANs on a numpy autodiff core."""

__version__ = "0.1.0"

from .estimators import SketchDistiller, SketchGAN

__all__ = ["SketchGAN", "SketchDistiller", "__version__"]
