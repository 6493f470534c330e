"""boxref: conditional cross-attention decoding with box-condensed
per-head reference points, plus the numerics, matching and benchmark
machinery needed to train and verify it at desk scale."""

__version__ = "0.1.0"
