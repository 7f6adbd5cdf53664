"""Dual-stream fusion image classifier: a NumPy autodiff engine, a
modulated deformable fusion block, knowledge-distillation losses, and a
reproducible training harness."""

from .data import (
    LabeledDataset,
    Preprocess,
    load_cifar10_binary,
    load_folder_dataset,
    normalize,
    resize_bicubic,
    stratified_split,
    subsample_fraction,
    synth_dataset,
)
from .deform import DeformFusionParams, deform_conv2d, fuse_streams, fusion_forward, predict_offsets_modulations
from .distill import DistillConfig, LossBreakdown, TeacherOutputs, ce_loss, kl_div, kl_loss, teacher_mixture, total_loss
from .gradcheck import GradCheckReport, grad_check
from .metrics import EvalReport, TsneConfig, emit_scatter_svg, evaluate, extract_features, joint_affinities, tsne
from .model import (
    BackboneConfig,
    FusionNet,
    FusionNetConfig,
    SingleStreamConfig,
    SingleStreamNet,
    count_params,
    estimate_flops,
    preset_config,
)
from .optim import AdamState, TrainConfig, accumulate_and_step, adam_step, cosine_lr
from .tensor import Tensor, backward, zero_grads

__version__ = "0.1.0"
