"""End-to-end fine-tuning of a text encoder with lazy graph propagation on text-attributed graphs."""

__version__ = "0.1.0"
