"""Vine segmentation of multi-band aerial orthomosaics.

Split an orthomosaic into tiles, standardize each tile per band, segment with
a U-Net, SegNet or ModSegNet written on a small numpy autograd core (or with
OTSU / K-means baselines), and rebuild a full-size mask.
"""

__version__ = "0.1.0"
