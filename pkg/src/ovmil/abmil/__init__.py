from .model import (
    PARAM_NAMES,
    AbmilError,
    AbmilParams,
    CacheError,
    EmptyBagError,
    ForwardCache,
    ShapeError,
    backward,
    balanced_ce_loss,
    class_weights,
    forward,
    init_params,
    loss_and_grad,
    predict_proba,
)
from .optim import AdamState, DivergenceError, adam_step
from .train import (
    CheckpointError,
    EpochRecord,
    best_val_loss,
    evaluate_loss,
    read_checkpoint,
    read_history,
    sampling_weights,
    train_fold,
    write_checkpoint,
    write_history,
)
