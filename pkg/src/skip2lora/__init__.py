"""Skip-topology LoRA fine-tuning with a forward activation cache for small MLPs."""
from .errors import ContractViolation, DataError, ShapeError
from .layers import ComputeType
from .linalg import MacCounter
from .network import FineTuneMode, Model, ModelSpec, build, compute_type_assignment, finetune_model
from .skipcache import SkipCache
from .trainer import RunMetrics, TrainConfig, evaluate, finetune, grad_check, pretrain

__version__ = "0.1.0"

__all__ = [
    "ComputeType", "ContractViolation", "DataError", "FineTuneMode", "MacCounter", "Model",
    "ModelSpec", "RunMetrics", "ShapeError", "SkipCache", "TrainConfig", "build",
    "compute_type_assignment", "evaluate", "finetune", "finetune_model", "grad_check", "pretrain",
]
