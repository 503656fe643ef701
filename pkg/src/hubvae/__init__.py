"""Hub-VAE: a VAE regularized by a mixture of hub-based priors and a
hub-based contrastive loss, built on numpy."""

from .clustering import kmeans, knn_purity, v_measure
from .dataio import Dataset, SyntheticSpec, load_csv, load_idx, make_synthetic
from .distributions import DiagGaussian, IsoGaussian, wasserstein2
from .model import decode, encode, generate
from .training import TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "Dataset", "DiagGaussian", "IsoGaussian", "SyntheticSpec", "TrainConfig",
    "decode", "encode", "fit", "generate", "kmeans", "knn_purity", "load_csv",
    "load_idx", "make_synthetic", "v_measure", "wasserstein2",
]
