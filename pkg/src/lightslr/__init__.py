"""Small-footprint spoken language recognition in numpy."""

from .audio_io import OTHER, AudioClip, DatasetManifest, ManifestEntry, load_wav, read_manifest, write_wav
from .errors import SLRError
from .evalbench import benchmark_rtf, evaluate, load_corpus, openset_experiment, synth_corpus
from .features import log_mel
from .inference import Decision, decide, predict_batch, predict_clip
from .models import ARCHITECTURES, HEADS, ModelConfig, build_model, count_params, load_weights, save_weights
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ARCHITECTURES", "HEADS", "OTHER", "AudioClip", "DatasetManifest", "Decision", "ManifestEntry",
    "ModelConfig", "SLRError", "TrainConfig", "benchmark_rtf", "build_model", "count_params", "decide",
    "evaluate", "load_corpus", "load_weights", "log_mel", "openset_experiment", "predict_batch",
    "predict_clip", "read_manifest", "save_weights", "synth_corpus", "train", "write_wav",
]
