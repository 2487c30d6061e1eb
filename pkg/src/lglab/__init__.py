"""Length-generalization lab: trained and hand-constructed sorting transformers."""

__version__ = "0.1.0"
