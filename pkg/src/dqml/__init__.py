"""Distributed quantum machine learning simulation lab.

Statevector-emulated QCNN classifiers on one or two small QPUs under
no-communication, classical-communication, and quantum-communication
schemes, with exact gradients, Fisher-information capacity analytics,
synthetic dataset generation, and a distributed classical-message
executor.
"""

__version__ = "0.1.0"

from .qstate import (
    Branch,
    GateOp,
    StateVector,
    apply_gate,
    branch_measure,
    haar_state,
    haar_unitary,
    measure_probabilities,
)
from .circuits import (
    FeedforwardLink,
    LayerSpec,
    ModelSpec,
    Scheme,
    build_model,
    conv_sublayer,
    embedding_layer,
    forward,
    forward_batch,
    model_from_json,
    model_to_json,
    pooling_layer,
    to_deferred,
)
from .gradients import (
    GradientRecord,
    adjoint_gradient,
    finite_diff_gradient,
    loss_and_grad,
    parameter_shift_gradient,
)
from .training import (
    AdamState,
    TrainConfig,
    TrainRecord,
    accuracy,
    adam_step,
    interpret,
    parity_weights,
    predict,
    train,
)
from .fisher import (
    FisherReport,
    SpectrumStats,
    effective_dimension,
    fisher_matrix,
    numerical_rank,
    spectrum_statistics,
)
from .datagen import (
    SyntheticDataset,
    haar_dataset,
    load_dataset,
    make_dataset,
    pearson,
    sample_ball,
    save_dataset,
    split,
)
from .distexec import (
    BranchLedger,
    ClassicalMessage,
    decode_message,
    encode_message,
    partition_model,
    run_distributed,
)
