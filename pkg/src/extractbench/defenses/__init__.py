from .inference import (
    AdaptiveMisinformation,
    GradientRedirection,
    OutputPerturbation,
    Prada,
    PredictionRounding,
    TopOne,
    build_transform,
    quantize,
    wrap_inference,
)
from .snnl import snnl, snnl_and_grad
from .spec import (
    DEFAULTS,
    DEFENSE_KINDS,
    INFERENCE_KINDS,
    TRAINING_KINDS,
    DefenseSpec,
    VerificationReport,
    WatermarkArtifact,
)
from .watermarks import (
    DefenseTrainingError,
    e_ave,
    e_ave_aggregate,
    marker_accuracy,
    train_defended,
    verify,
)
