"""Blastocyst segmentation toolkit.

Everything runs on numpy: convolutional layers with hand-written backward
passes, four U-Net style architectures, the full training recipe, metric
reports, a synthetic embryo phantom generator, and an HTTP service plus CLI
wrapping it all.
"""

__version__ = "0.1.0"
