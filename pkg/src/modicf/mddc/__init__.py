from .schedule import NoiseSchedule, build_noise_schedule, forward_diffuse
from .networks import (
    ModalityAutoencoder,
    ConditionFusionNet,
    DenoiserNetwork,
    cross_attention,
    timestep_embedding,
)
from .completion import (
    MddcState,
    accelerated_sample,
    build_mddc_state,
    fuse_conditions,
    denoise_predict,
    reverse_step,
    generate_missing,
    generate_all_missing,
    mddc_losses,
    iterative_refine,
)

__all__ = [
    "NoiseSchedule",
    "accelerated_sample",
    "build_noise_schedule",
    "forward_diffuse",
    "ModalityAutoencoder",
    "ConditionFusionNet",
    "DenoiserNetwork",
    "cross_attention",
    "timestep_embedding",
    "MddcState",
    "build_mddc_state",
    "fuse_conditions",
    "denoise_predict",
    "reverse_step",
    "generate_missing",
    "generate_all_missing",
    "mddc_losses",
    "iterative_refine",
]
