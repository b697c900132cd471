"""Desk-scale mixture-of-experts speaker adaptation testbed."""

from .autodiff import Tensor, backward, gradients
from .corpus import CorpusConfig, generate_corpus, load_corpus
from .harness import ExperimentConfig, run_experiment, run_pipeline
from .losses import LossWeights
from .model import EncoderConfig, ModelParams
from .optim import Adam
from .router import RouterConfig, RouterParams

__version__ = "0.1.0"

__all__ = [
    "Adam", "CorpusConfig", "EncoderConfig", "ExperimentConfig", "LossWeights",
    "ModelParams", "RouterConfig", "RouterParams", "Tensor", "backward",
    "generate_corpus", "gradients", "load_corpus", "run_experiment", "run_pipeline",
    "__version__",
]
