"""forgecam: a from-scratch numpy CNN for image forgery detection with Grad-CAM
localization, plus copy-move and inpainting forgery synthesis."""

__version__ = "0.1.0"
