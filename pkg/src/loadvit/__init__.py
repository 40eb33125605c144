"""Vision-transformer load-profile analysis: load images, masked-autoencoder
pre-training, PV/EV identification and HVAC disaggregation."""

__version__ = "0.1.0"
