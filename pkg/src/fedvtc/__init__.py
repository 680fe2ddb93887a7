"""Model-heterogeneous federated learning with variational transposed-convolution decoders."""

__version__ = "0.1.0"
