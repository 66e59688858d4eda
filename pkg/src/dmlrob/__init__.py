"""Adversarial robustness of deep metric learning under clustering-based inference.

Library layout:

* :mod:`dmlrob.rng`, :mod:`dmlrob.optim`, :mod:`dmlrob.gradcheck` - the
  deterministic numeric kernel (splittable RNG, AdamW, finite differences);
* :mod:`dmlrob.model` - the dense embedding network with hand-derived
  forward/backward passes;
* :mod:`dmlrob.losses` - triplet, proxy-anchor, and embedding-divergence
  losses with exact gradients;
* :mod:`dmlrob.attacks` - l-infinity PGD, single-model and ensemble variants;
* :mod:`dmlrob.defenses` - all training procedures, including ensemble
  adversarial training with the data-split mechanism;
* :mod:`dmlrob.evaluation` - k-means, NMI, pairwise F1, Recall@k, voting
  inference, and the clean/attacked evaluation driver;
* :mod:`dmlrob.data` - synthetic class-disjoint benchmarks and CSV ingestion;
* :mod:`dmlrob.cli` - the experiment runner.
"""

from .attacks import AdversarialBatch, AttackConfig, pgd_ensemble, pgd_single, project_linf
from .data import Dataset, class_disjoint_split, gen_synthetic, load_csv, save_csv
from .defenses import (
    Ensemble,
    TrainConfig,
    TrainResult,
    defense_loss,
    load_ensemble,
    save_ensemble,
    split_dataset,
    train,
)
from .errors import (
    ConfigError,
    DataFormatError,
    DmlrobError,
    NumericError,
    ResampleBatch,
    ShapeError,
)
from .evaluation import (
    ClusterAssignment,
    MetricsReport,
    evaluate,
    kmeans,
    nmi,
    pairwise_f1,
    recall_at_k,
    vote_predict,
)
from .gradcheck import finite_diff_grad
from .losses import ProxySet, TripletConfig, embed_divergence, init_proxies, pal_loss, triplet_loss
from .model import EmbeddingModel, ModelSpec, backward, forward, init_model, load_model, save_model
from .optim import LrSchedule, OptimizerState, adamw_step, lr_at
from .rng import Rng, sample_beta

__version__ = "0.1.0"
