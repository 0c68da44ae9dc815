from .checkpoint import load_model, save_model
from .metrics import accuracy, macro_f1, macro_precision, macro_recall, per_class_prf
from .model import (
    BACKBONES,
    GnnModel,
    Predictions,
    Structure,
    backward,
    forward,
    forward_cache,
    hidden_embeddings,
    init_model,
    log_softmax,
    predict,
    softmax,
)
from .train import (
    Adam,
    LossTerm,
    TrainConfig,
    TrainingDiverged,
    fit,
    loss_and_grad,
    terms_loss,
    train,
    train_target,
)
