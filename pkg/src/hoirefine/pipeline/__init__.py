"""Initial reconstruction, contact estimation and contact-masked refinement."""
from .losses import TERMS, loss_terms, loss_total
from .model import (
    Batch, MASKING_MODES, Model, ModelConfig, PipelineOutput, gt_joint_targets, make_batch,
    project_t, rodrigues_t,
)
from .training import (
    Prediction, TrainConfig, TrainingDiverged, infer, load_model, mean_loss, predict,
    split_train_val, train,
)
