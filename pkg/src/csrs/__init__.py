"""Code search by joint relevance and semantic matching of descriptions and code."""
from .corpus import CodeRecord, EncodedCorpus, LengthConfig, Vocabulary
from .evaluation import EvalReport, evaluate, mrr, ndcg, recall_at_k
from .model import CsrsModel, ModelConfig, load_checkpoint
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = ["CodeRecord", "EncodedCorpus", "LengthConfig", "Vocabulary", "EvalReport", "evaluate",
           "mrr", "ndcg", "recall_at_k", "CsrsModel", "ModelConfig", "load_checkpoint",
           "TrainConfig", "train"]
