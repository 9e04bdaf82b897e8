"""Self-supervised foreground segmentation over dense patch features."""

from .affinity import AffinityGraph, build_affinity, normalize_features
from .formats import FeatureField, PatchMask, ProbMap, read_dpf, read_mask_pgm, write_dpf, write_mask_pgm
from .head import HeadParams, LossBreakdown, adam_init, adam_step, head_forward, init_params, load_head, loss_bce, loss_contrastive, loss_dice, loss_total_and_grads, save_head
from .ipo import IpoState, ipo_init, ipo_run, ipo_step
from .spectral import Bipartition, dense_eig_oracle, fiedler_vector, init_cls, init_kmeans2, ncut_bipartition, resolve_and_component, threshold_at_mean
from .trainer import TrainConfig, bilinear_upsample, generate_pseudolabels, infer, train_head

__version__ = "0.1.0"
