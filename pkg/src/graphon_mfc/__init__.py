"""Mean-field control of graphon-interacting diffusions on a label grid."""

__version__ = "0.1.0"
