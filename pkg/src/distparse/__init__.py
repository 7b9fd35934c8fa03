"""Syntactic-distance constituency parsing toolkit.

Converts binary constituency trees to and from per-word and per-gap
syntactic distances, trains a window-convolution distance predictor with
pairwise ranking losses, scores parses with bracket F1, and bootstraps
silver training data from the consensus of an ensemble of parsers.
"""

__version__ = "0.1.0"
