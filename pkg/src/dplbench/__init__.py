"""Domain-conditioned prompt learning on a toy dual encoder, with a
leave-one-domain-out benchmark harness."""

__version__ = "0.1.0"
