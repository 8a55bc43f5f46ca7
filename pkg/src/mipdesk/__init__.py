"""Anti-aliased neural radiance fields with integrated positional encoding, at desk scale."""

__version__ = "0.1.0"
