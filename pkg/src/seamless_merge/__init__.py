try:
    from importlib.metadata import version
    __version__ = version("seamless-merge")
except ImportError:
    __version__ = "unknown"
