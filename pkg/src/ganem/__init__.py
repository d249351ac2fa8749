"""GAN-based expectation maximization for clustering, from a small autodiff engine up."""

__version__ = "0.1.0"

from .data import Dataset, load_idx, sample_labeled_subset, synth_mixture  # noqa: E402
from .emcore import EmConfig, m_step, e_step, run_gan_em, update_prior  # noqa: E402
from .metrics import clustering_error, classification_error  # noqa: E402
from .oracles import gmm_em_fit, kmeans_fit  # noqa: E402

__all__ = [
    "Dataset",
    "EmConfig",
    "classification_error",
    "clustering_error",
    "e_step",
    "gmm_em_fit",
    "kmeans_fit",
    "load_idx",
    "m_step",
    "run_gan_em",
    "sample_labeled_subset",
    "synth_mixture",
    "update_prior",
]
