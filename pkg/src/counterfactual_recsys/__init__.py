from counterfactual_recsys._logging import reset_logger, set_verbosity
from counterfactual_recsys.data import leave_last_split, load_interactions
from counterfactual_recsys.evaluation import EvalProtocol, Weighting, evaluate
from counterfactual_recsys.models import ModelKind, init_model
from counterfactual_recsys.propensity import PropensityHead, RegularizerKind
from counterfactual_recsys.settings import RunConfig
from counterfactual_recsys.simulation import SimConfig, generate_semi_synthetic
from counterfactual_recsys.training import TrainConfig, TrainMode, acl_train, erm_train, ps_train

__all__ = [
    "EvalProtocol",
    "ModelKind",
    "PropensityHead",
    "RegularizerKind",
    "RunConfig",
    "SimConfig",
    "TrainConfig",
    "TrainMode",
    "Weighting",
    "acl_train",
    "erm_train",
    "evaluate",
    "generate_semi_synthetic",
    "init_model",
    "leave_last_split",
    "load_interactions",
    "ps_train",
    "reset_logger",
    "set_verbosity",
]
