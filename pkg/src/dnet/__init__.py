"""D-Net family of volumetric segmentation networks on a small numpy tensor engine."""

__version__ = "0.1.0"
