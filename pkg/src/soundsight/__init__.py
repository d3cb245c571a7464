"""Sound command following from visual-audio representations."""

__version__ = "0.1.0"
