# Copyright (c) 2025
# 模型合并自适应 - 脚本包初始化

"""多源无源域自适应：低秩任务向量的线性合并与贝叶斯优化。"""

from .bayes_opt import BoConfig, BoTrace, GpModel, optimize, random_search
from .env_helper import ExperimentConfig, load_config
from .metrics import QwkAccumulator, qwk, qwk_from_scores
from .param_algebra import LowRankUpdate, MergeSpec, ParamSet, TaskVector, merge
from .pim_objective import ObjectiveConfig, ObjectiveValue, ObjectiveVariant, evaluate
from .pipeline import ExperimentPipeline, RunManifest
from .score_prior import BetaParams, DiscretePrior, ScoreRange, SourceStatistics, build_prior
from .scoring_model import LabeledSet, ProbScorer, TrainConfig, batch_predict, predict

__all__ = [
    "BetaParams",
    "BoConfig",
    "BoTrace",
    "DiscretePrior",
    "ExperimentConfig",
    "ExperimentPipeline",
    "GpModel",
    "LabeledSet",
    "LowRankUpdate",
    "MergeSpec",
    "ObjectiveConfig",
    "ObjectiveValue",
    "ObjectiveVariant",
    "ParamSet",
    "ProbScorer",
    "QwkAccumulator",
    "RunManifest",
    "ScoreRange",
    "SourceStatistics",
    "TaskVector",
    "TrainConfig",
    "batch_predict",
    "build_prior",
    "evaluate",
    "load_config",
    "merge",
    "optimize",
    "predict",
    "qwk",
    "qwk_from_scores",
    "random_search",
]
