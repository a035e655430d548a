# Copyright (c) 2025
# 模型合并自适应 - PIM 目标函数

"""先验编码的信息最大化目标 f(λ) 及其消融变体。

PIM:            -KL(p(y|λ) || q(y)) - mean_i H(p(y|x_i, λ))
PIM_no_entropy: -KL(p(y|λ) || q(y))
PIM_no_kl:      -mean_i H(p(y|x_i, λ))
MI_uniform:     H(p(y|λ)) - mean_i H(p(y|x_i, λ))，即 q 换成均匀分布的互信息估计

全部使用自然对数，epsilon 只加在对数内部，不改动概率本身。
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np
from scipy import special

from .errors import DistributionError, MissingPriorError
from .score_prior import DiscretePrior

logger = logging.getLogger(__name__)

NORMALIZATION_TOL = 1e-9


class ObjectiveVariant(str, Enum):
    PIM = "PIM"
    PIM_NO_ENTROPY = "PIM_no_entropy"
    PIM_NO_KL = "PIM_no_kl"
    MI_UNIFORM = "MI_uniform"


@dataclass(frozen=True)
class ObjectiveConfig:
    variant: ObjectiveVariant = ObjectiveVariant.PIM
    prior: Optional[DiscretePrior] = None
    epsilon: float = 1e-12

    def __post_init__(self):
        object.__setattr__(self, "variant", ObjectiveVariant(self.variant))
        if self.epsilon <= 0:
            raise DistributionError(f"epsilon 必须为正: {self.epsilon}")


@dataclass(frozen=True)
class ObjectiveValue:
    """f(λ) 及其两个组成项。entropy_term 为逐样本熵的均值。"""

    total: float
    kl_term: float
    entropy_term: float
    n_samples: int

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "kl": self.kl_term,
            "ent": self.entropy_term,
            "n": self.n_samples,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ObjectiveValue":
        return cls(
            float(payload["total"]),
            float(payload["kl"]),
            float(payload["ent"]),
            int(payload.get("n", 0)),
        )


def as_distributions(dists: Union[np.ndarray, Sequence[np.ndarray]]) -> np.ndarray:
    """把一批分布转成 N×C 矩阵并校验归一化。"""
    if isinstance(dists, np.ndarray):
        matrix = np.asarray(dists, dtype=np.float64)
    else:
        if len(dists) == 0:
            raise DistributionError("分布列表为空")
        lengths = {len(d) for d in dists}
        if len(lengths) != 1:
            raise DistributionError(f"分布长度不一致: {sorted(lengths)}")
        matrix = np.asarray([np.asarray(d, dtype=np.float64) for d in dists])
    if matrix.ndim == 1:
        matrix = matrix[None, :]
    if matrix.ndim != 2 or matrix.shape[0] == 0:
        raise DistributionError("分布列表为空")
    if not np.all(np.isfinite(matrix)) or np.any(matrix < 0):
        raise DistributionError("概率向量含负值或非有限值")
    sums = matrix.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > NORMALIZATION_TOL):
        raise DistributionError(f"概率向量未归一化，最大偏差 {np.max(np.abs(sums - 1.0)):.3g}")
    return matrix


def marginal(dists: Union[np.ndarray, Sequence[np.ndarray]]) -> np.ndarray:
    """p(y|θ) = 1/N Σ_i p(y|x_i, θ)。"""
    matrix = as_distributions(dists)
    n = matrix.shape[0]
    return np.array([math.fsum(matrix[:, c]) / n for c in range(matrix.shape[1])])


def entropy(d: np.ndarray) -> float:
    """-Σ p ln p，约定 0·ln 0 = 0。"""
    return max(0.0, math.fsum(special.entr(np.asarray(d, dtype=np.float64))))


def kl_divergence(p: np.ndarray, q: Union[DiscretePrior, np.ndarray], epsilon: float = 1e-12) -> float:
    """Σ p_c ln((p_c + ε) / (q_c + ε))，p_c = 0 的项贡献为零。"""
    p = np.asarray(p, dtype=np.float64)
    q_probs = q.probs if isinstance(q, DiscretePrior) else np.asarray(q, dtype=np.float64)
    if p.shape != q_probs.shape:
        raise DistributionError(f"分布长度不一致: {p.shape} vs {q_probs.shape}")
    mask = p > 0
    terms = p[mask] * (np.log(p[mask] + epsilon) - np.log(q_probs[mask] + epsilon))
    return max(0.0, math.fsum(terms))


def _mean_entropy(matrix: np.ndarray) -> float:
    per_sample = special.entr(matrix).sum(axis=1)
    return max(0.0, math.fsum(per_sample) / matrix.shape[0])


def evaluate(dists: Union[np.ndarray, Sequence[np.ndarray]], cfg: ObjectiveConfig) -> ObjectiveValue:
    """
    计算一批样本分布上的目标值。

    Args:
        dists: 每个样本的分数分布（N×C_T）
        cfg: 目标函数配置

    Returns:
        ObjectiveValue
    """
    matrix = as_distributions(dists)
    n, c = matrix.shape
    variant = cfg.variant

    if variant != ObjectiveVariant.MI_UNIFORM:
        if cfg.prior is None:
            raise MissingPriorError(f"变体 {variant.value} 需要先验 q(y)")
        if len(cfg.prior) != c:
            raise DistributionError(f"先验长度 {len(cfg.prior)} 与分布长度 {c} 不一致")
        reference = cfg.prior.probs
    else:
        reference = np.full(c, 1.0 / c)

    p_marginal = marginal(matrix)
    kl_term = kl_divergence(p_marginal, reference, cfg.epsilon)
    entropy_term = _mean_entropy(matrix)

    if variant == ObjectiveVariant.PIM:
        total = -kl_term - entropy_term
    elif variant == ObjectiveVariant.PIM_NO_ENTROPY:
        total = -kl_term
    elif variant == ObjectiveVariant.PIM_NO_KL:
        total = -entropy_term
    else:
        total = entropy(p_marginal) - entropy_term

    return ObjectiveValue(float(total), float(kl_term), float(entropy_term), int(n))
