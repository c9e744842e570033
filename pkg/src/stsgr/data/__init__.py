from .dataset import Dataset, DatasetError, DialogExample, load_dataset, write_dataset
from .synth import SyntheticTaskSpec, synthesize
from .text import Vocabulary, detokenize, tokenize

__all__ = [
    "Dataset",
    "DatasetError",
    "DialogExample",
    "SyntheticTaskSpec",
    "Vocabulary",
    "detokenize",
    "load_dataset",
    "synthesize",
    "tokenize",
    "write_dataset",
]
