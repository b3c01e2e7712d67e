from .globals import VERSION

__version__ = VERSION
