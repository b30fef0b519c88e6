"""Mel-spectrogram residual vector quantization and masked token prediction."""

from .contrastive import DclConfig, EmbeddingPair, dcl_loss, pool_project, tag_scores
from .dsp import AudioClip, DspConfig, InputStats, MelFeaturizer, MelSpectrogram, load_wav, mel_spectrogram
from .errors import *  # noqa: F401,F403
from .rvq import MelRvq, StageParams, TokenSequence, decode, encode, load_checkpoint, losses, save_checkpoint
from .ssl import MaskConfig, MaskedTokenPredictor, ModelConfig, OptimConfig, SslToyModel, iterate, pretrain
from .train import MelRVQTokenizer, QuantizerConfig, TrainConfig, freeze_random, train

__version__ = "0.1.0"
