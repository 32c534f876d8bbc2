"""Sequential knowledge editing of a toy transformer LM with a gradient-signal editing network."""

__version__ = "0.1.0"
