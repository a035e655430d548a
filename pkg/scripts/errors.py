# Copyright (c) 2025
# 模型合并自适应 - 异常定义

"""各模块共用的异常类型。

每个异常同时继承最接近的内置异常，调用方可以直接捕获 ValueError / RuntimeError。
"""

from typing import Any, Optional


class MergeAdaptError(Exception):
    """所有异常的基类。"""


class StructuralError(MergeAdaptError, ValueError):
    """参数结构不匹配（层名、形状、长度）。"""


class ScoreRangeError(MergeAdaptError, ValueError):
    """分数越界或分数区间非法。"""


class BetaFitError(MergeAdaptError, ValueError):
    """样本不足或样本退化，无法拟合 Beta 分布。"""


class BetaConvergenceError(MergeAdaptError, RuntimeError):
    """Beta 最大似然迭代未收敛，附带迭代过程中的最优解。"""

    def __init__(self, message: str, best: Any):
        super().__init__(message)
        self.best = best


class MomentFeasibilityError(MergeAdaptError, ValueError):
    """混合分布的均值/方差无法由单个 Beta 分布表示。"""


class NumericError(MergeAdaptError, ArithmeticError):
    """数值计算得到非有限值。"""


class DistributionError(MergeAdaptError, ValueError):
    """概率向量非法或批次为空。"""


class MissingPriorError(MergeAdaptError, ValueError):
    """目标函数变体需要先验，但未提供。"""


class TrainingDivergenceError(MergeAdaptError, RuntimeError):
    """训练损失出现非有限值。"""


class ConditioningError(MergeAdaptError, RuntimeError):
    """抖动升级到上限后 Cholesky 分解仍失败。"""


class ObjectiveEvaluationError(MergeAdaptError, RuntimeError):
    """黑盒目标函数求值失败，附带已完成部分的轨迹。"""

    def __init__(self, message: str, trace: Optional[Any] = None):
        super().__init__(message)
        self.trace = trace


class DegenerateRatingsError(MergeAdaptError, ValueError):
    """评分输入退化，QWK 无定义。"""


class ConfigError(MergeAdaptError, ValueError):
    """实验配置非法。"""


class ReportError(MergeAdaptError, ValueError):
    """指标 CSV 为空或格式错误。"""


class MissingArtifactError(MergeAdaptError, FileNotFoundError):
    """清单中缺少前一阶段的产物。"""
