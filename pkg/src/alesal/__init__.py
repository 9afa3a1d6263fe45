"""Contactless sleep apnea and limb-movement detection from Wi-Fi CSI."""

__version__ = "0.1.0"
