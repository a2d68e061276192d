"""Align speech frames to a frozen text model by integrate-and-fire grafting."""

from .cif import (AlignmentWeights, BoundarySet, CifConfig, FiredAlignment, FrameSequence,
                  TailPolicy, WeightPredictor, extract_boundaries, integrate_and_fire,
                  predict_weights, quantity_loss, scale_weights)
from .errors import CifAlignError
from .losses import LossConfig, aligned_token_similarity_loss, cosine_align_loss, info_nce
from .models import GraftedModel, LinguisticModel, inference_forward, load_checkpoint, save_checkpoint
from .synthdata import SynthConfig, generate_corpus, generate_utterances, load_corpus, split_corpus
from .train import TrainConfig, evaluate_checkpoint, finetune_downstream, train_align

__version__ = "0.1.0"
