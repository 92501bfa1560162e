"""slidemil: weakly supervised attention-MIL pipeline on synthetic tiled slides."""

__version__ = "0.1.0"
