from aroface.harness.config import RunConfig, load_config, load_settings, parse_overrides, write_config
from aroface.harness.evaluation import EvaluationReport, evaluate
from aroface.harness.experiments import ablate, alpha_study, run_and_evaluate, sweep
from aroface.harness.gradcheck import GradcheckReport
from aroface.harness.gradcheck import gradcheck as run_gradcheck
from aroface.harness.metrics import EvalMetrics, TarEntry
from aroface.harness.training import TrainingReport, TrainMode, TrainResult, prepare_data, train

__all__ = [
    "EvalMetrics",
    "EvaluationReport",
    "GradcheckReport",
    "RunConfig",
    "TarEntry",
    "TrainMode",
    "TrainResult",
    "TrainingReport",
    "ablate",
    "alpha_study",
    "evaluate",
    "load_config",
    "load_settings",
    "parse_overrides",
    "prepare_data",
    "run_and_evaluate",
    "run_gradcheck",
    "sweep",
    "train",
    "write_config",
]
