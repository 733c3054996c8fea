"""Quaternion and octonion knowledge-graph embeddings (QMult, OMult, ConvQ, ConvO)."""

from .algebra import HypercomplexVector, oct_inner, oct_mul, quat_inner, quat_mul, unit_normalize
from .estimator import HypercomplexKGE
from .evaluation import RankingReport, ensemble_scores, evaluate, filtered_rank, per_relation_report
from .graphstore import TripleStore, build_store, load_dataset, load_triples
from .models import ConvConfig, ModelParams, init_params, score_all_tails
from .train import EpochLog, TrainConfig, fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
