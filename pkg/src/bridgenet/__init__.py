"""Bridge networks: two independent convolutional towers trained to place
matched pairs of views close together and artificial mismatched pairs far
apart, plus the evaluation protocols built on the learned representations."""

__version__ = "0.1.0"
