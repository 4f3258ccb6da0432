"""Unsupervised cross-domain image retrieval with learned text prompts and Fourier phase priors."""

from .config import ConfigError, RunConfig, load_config, save_config
from .dataset import DomainDataset, ImageSample, generate_toy_domain_pair, load_domain_directory
from .retrieval import MetricsTable, precision_at_k

__all__ = [
    "ConfigError",
    "DomainDataset",
    "ImageSample",
    "MetricsTable",
    "RunConfig",
    "generate_toy_domain_pair",
    "load_config",
    "load_domain_directory",
    "precision_at_k",
    "save_config",
]
