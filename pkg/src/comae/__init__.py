"""comae: curriculum self-supervised pre-training for paired RGB-depth data.

Stage 1 aligns RGB and depth patches of the same image location with a
within-pair contrastive objective; stage 2 continues with multi-modal masked
autoencoding on one shared encoder/decoder; fine-tuning classifies scenes
from either or both modalities with modality dropout.
"""

__version__ = "0.1.0"

from .config import Config, ConfigError, load_config
from .cpc import cpc_features, cpc_loss, cpc_retrieval_accuracy, similarity_matrix
from .data import (PairedSample, SyntheticPairs, augment_finetune,
                   augment_pretrain, drop_modality, encode_depth,
                   generate_synthetic_pair)
from .encoder import CoMAEModel, attention_maps, build_model, cross_modal_diagonal_mass
from .errors import NumericError
from .finetune import classify, effective_lr, layer_lr_scale
from .masking import MaskPlan, make_mask, scatter_full, split_visible
from .metrics import EvalReport, compute_report
from .mmmae import ReconstructionOutput, mmmae_forward, mmmae_loss, render_reconstruction
from .pipeline import PLANS, run_pipeline
from .tokenizer import (PatchGrid, TokenSequence, patchify, per_patch_normalize,
                        sincos_pos_table, unpatchify)
