"""HyNT: transformer representation learning on hyper-relational knowledge graphs with numeric literals."""

from .kg import Dataset, Discrete, HyperFact, Numeric, Qualifier, Vocabulary, make_fact
from .model import HyNT, HyntConfig

__all__ = [
    "Dataset",
    "Discrete",
    "HyNT",
    "HyntConfig",
    "HyperFact",
    "Numeric",
    "Qualifier",
    "Vocabulary",
    "make_fact",
]
__version__ = "0.1.0"
