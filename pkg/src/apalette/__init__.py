"""Controllable Foley synthesis: acoustic control signals driving a tiny
latent diffusion transformer, fine-tuned with low-rank adapters and sampled
under three-scale guidance."""

from .audio_io import (AudioClip, DatasetManifest, SynthSpec, build_dataset,
                       read_wav, synth_clip, write_wav)
from .codec import LatentSeq, decode, encode
from .conditioning import (CondState, ProjectionWeights, TextEmbedding,
                           embed_text, fuse, project_controls, sample_dropout)
from .diffusion import (GuidanceScales, NoiseSchedule, TrainConfig, cfg_combine,
                        finetune, load_checkpoint, q_sample, sample, training_loss)
from .dit import AttentionWeights, DiTConfig, DiTModel, attention, count_params, forward
from .evaluation import (AdherenceResult, EmbeddingStats, EvalReport, control_adherence,
                         embed_audio, fit_embedding_stats, frechet_distance,
                         run_ablation, similarity_score)
from .features import (ControlSignals, FrameGrid, NormStats, extract_controls,
                       median_filter, mfcc13, normalize_controls, pitch_track,
                       random_median_filter, read_apcs, resample_controls,
                       rms_loudness, spectral_centroid, write_apcs)
from .lora import LoRAAdapter, merge, trainable_fraction

__version__ = "0.1.0"
