"""Multi-scale adversarial + self-ensembling domain adaptation for disc/cup segmentation."""
__version__ = "0.1.0"
