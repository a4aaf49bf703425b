"""Post-processing of decoded video with residual CNNs: models, losses, training and evaluation."""

__version__ = "0.1.0"
