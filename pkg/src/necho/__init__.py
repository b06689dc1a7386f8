"""Code-centric multimodal next-visit diagnosis prediction on a numpy autodiff core."""

__version__ = "0.1.0"
