"""CSI-to-point-cloud pipeline: model, losses, training, ICP evaluation."""

__version__ = "0.1.0"
