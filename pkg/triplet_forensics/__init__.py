try:
    from importlib import metadata as importlib_metadata
    __version__ = importlib_metadata.version("triplet-forensics")
    del importlib_metadata
except ImportError:
    # No importlib_metadata, or the package is used from a source checkout that was never
    # installed (PackageNotFoundError is an ImportError). Not a recommended way, but we still
    # try to support it.
    __version__ = "unknown" # :nocov:
