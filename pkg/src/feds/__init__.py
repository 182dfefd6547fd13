"""Teacher/student learned image codec with real entropy coding and a
distillation training pipeline."""

from .bitstream import (
    BitstreamContainer,
    compress_image,
    decompress_image,
    estimated_bpp,
)
from .distillation import (
    LAMBDA_PRESETS,
    DistillationBatchOutputs,
    FEDSWeights,
    StagePlan,
    feature_loss,
    latent_loss,
    output_loss,
    select_teacher_channels,
    stage_plan,
    student_total_loss,
    teacher_loss,
)
from .entropy import (
    ChannelEntropyRanking,
    FactorizedPrior,
    GaussianParams,
    SliceLayout,
    channel_entropy_profile,
    charm_predict_slice,
    factorized_likelihood,
    gaussian_likelihood,
    quantize,
    rank_channels_topk,
    rate_bits,
    slice_layout,
)
from .metrics import (
    BDRateResult,
    RDCurve,
    RDPoint,
    bd_rate,
    emit_reports,
    evaluate_model,
    ms_ssim,
    psnr,
)
from .model import CodecModel, analysis_transform, hyper_transforms, synthesis_transform
from .networks import ImageBuffer, NetworkConfig, build_network_config, pad_image
from .training import (
    Checkpoint,
    DatasetSpec,
    OptimizerSpec,
    checkpoint_load,
    checkpoint_save,
    prepare_dataset,
    run_stage,
)

__version__ = "0.1.0"

__all__ = [
    "BDRateResult",
    "BitstreamContainer",
    "ChannelEntropyRanking",
    "Checkpoint",
    "CodecModel",
    "DatasetSpec",
    "DistillationBatchOutputs",
    "FEDSWeights",
    "FactorizedPrior",
    "GaussianParams",
    "ImageBuffer",
    "LAMBDA_PRESETS",
    "NetworkConfig",
    "OptimizerSpec",
    "RDCurve",
    "RDPoint",
    "SliceLayout",
    "StagePlan",
    "analysis_transform",
    "bd_rate",
    "build_network_config",
    "channel_entropy_profile",
    "charm_predict_slice",
    "checkpoint_load",
    "checkpoint_save",
    "compress_image",
    "decompress_image",
    "emit_reports",
    "estimated_bpp",
    "evaluate_model",
    "factorized_likelihood",
    "feature_loss",
    "gaussian_likelihood",
    "hyper_transforms",
    "latent_loss",
    "ms_ssim",
    "output_loss",
    "pad_image",
    "prepare_dataset",
    "psnr",
    "quantize",
    "rank_channels_topk",
    "rate_bits",
    "run_stage",
    "select_teacher_channels",
    "slice_layout",
    "stage_plan",
    "student_total_loss",
    "synthesis_transform",
    "teacher_loss",
]
