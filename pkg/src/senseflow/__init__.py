"""senseflow: motion estimation and correction for multishot radial SENSE MRI."""

__version__ = "0.1.0"
