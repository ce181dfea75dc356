from .errors import SigStyleError

__version__ = "0.1.0"
