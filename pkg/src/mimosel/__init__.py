"""Joint transmit-antenna selection and 1-bit hybrid beamforming.

A numpy library for massive-MIMO downlink experiments: a small reverse-mode
autodiff engine, a synthetic clustered-multipath channel generator, the
rate/constraint machinery, classical baselines incl. a brute-force oracle,
two coupled neural networks trained unsupervised in three phases, and a CLI
harness for experiments.
"""

from .autodiff import (
    AdamState,
    BatchNormState,
    ComplexPair,
    Tape,
    Tensor,
    adam_step,
    batch_norm,
    concat,
    conv2d,
    gradients,
    load_params,
    logdet_hermitian_pd,
    record_primitive,
    save_params,
)
from .baselines import (
    BaselineResult,
    cdm_altmin,
    exhaustive_joint_search,
    full_array_reference,
    gas_cdm,
    greedy_antenna_selection,
    random_antenna_selection,
    ras_cdm,
    switch_based_reference,
)
from .channel import (
    ChannelModelConfig,
    Dataset,
    generate_channel,
    generate_dataset,
    perturb_csi,
    read_dataset,
    split_dataset,
    steering_vector,
    write_dataset,
)
from .errors import (
    ConfigMismatchError,
    ContractError,
    DegenerateInputError,
    DimensionError,
    FormatError,
    MimoselError,
    NumericalError,
    SearchSpaceError,
    StateError,
)
from .mimo import (
    HybridBeamformer,
    PhaseQuantizerConfig,
    SelectionMatrix,
    SystemConfig,
    achieved_rate,
    analog_from_phases,
    full_digital_precoder,
    full_digital_rate,
    hard_select,
    logits_to_probabilities,
    normalize_digital,
    optimal_digital_beamformer,
    quantize_phase,
    relaxed_select,
    selected_channel,
    soft_quantize_phase,
    water_filling,
)
from .nets import (
    FeatureExtractorConfig,
    JointModel,
    asnet_forward,
    bfnet_forward,
    build_input_tensor,
    extract_features,
    joint_forward,
    load_model,
    save_model,
)
from .training import (
    EpochStats,
    LossBreakdown,
    TrainConfig,
    fine_tune,
    history_to_csv,
    loss_pen1,
    loss_pen2,
    loss_pen3,
    loss_rate,
    phased_train,
    temperature,
)

__version__ = "0.1.0"
