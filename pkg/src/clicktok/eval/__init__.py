from .embeddings import (
    EmbeddingModel,
    builtin_embeddings,
    matm_pooled,
    onset_features,
    random_projection,
    token_histogram,
)
from .fad import (
    FadReport,
    GaussianStats,
    calibrate_embeddings,
    fad_report,
    fit_gaussian,
    frechet_distance,
    natural_baseline,
    normalize_fad,
)
from .kappa import RatingsFile, RatingsMatrix, fleiss_kappa
from .probe import ProbeConfig, ProbeResult, train_probe
from .recon import ReconStudy, recon_error_study
