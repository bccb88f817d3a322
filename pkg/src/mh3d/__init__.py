"""Multi-harmonic 3D deconvolution (MH3D) toolkit for magnetic particle imaging."""

__version__ = "0.1.0"
