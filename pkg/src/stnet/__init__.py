"""Unpaired compatible-item synthesis with style/texture and dual latent critics."""
__version__ = "0.1.0"
