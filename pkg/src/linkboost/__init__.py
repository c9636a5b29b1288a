"""Link prediction with per-relation boosted trees over frozen KG embeddings."""
from .embedding import EmbeddingModel, EmbeddingTrainConfig, load_model, save_model, train_embeddings
from .gbt import GbtConfig, TreeEnsemble, train_ensemble
from .kg import PairSet, TripleStore, load_dataset
from .pipeline import MetricsReport, PipelineConfig, evaluate, run_pipeline

__version__ = "0.1.0"
