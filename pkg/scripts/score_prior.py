# Copyright (c) 2025
# 模型合并自适应 - 分数先验模块

"""由源域统计量构造目标域分数先验 q(y)。

流程：分数缩放到 (0,1) -> 每个源域做 Beta 最大似然 -> 混合分布矩匹配成单个 Beta
-> 在目标域分数区间上离散化。源数据集删除后只保留 SourceStatistics。
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
from scipy import special

from .errors import (
    BetaConvergenceError,
    BetaFitError,
    DistributionError,
    MomentFeasibilityError,
    NumericError,
    ScoreRangeError,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# Newton 迭代参数
MLE_MAX_ITER = 500
MLE_STEP_TOL = 1e-8
PARAM_MIN = 1e-3
PARAM_MAX = 1e6


@dataclass(frozen=True)
class ScoreRange:
    """整数分数区间 [a, b]，类别数 C = b - a + 1。"""

    a: int
    b: int

    def __post_init__(self):
        if int(self.a) != self.a or int(self.b) != self.b:
            raise ScoreRangeError(f"分数区间端点必须是整数: [{self.a}, {self.b}]")
        if self.b - self.a + 1 < 2:
            raise ScoreRangeError(f"分数区间至少包含 2 个类别: [{self.a}, {self.b}]")
        object.__setattr__(self, "a", int(self.a))
        object.__setattr__(self, "b", int(self.b))

    @property
    def n_classes(self) -> int:
        return self.b - self.a + 1

    def contains(self, score: int) -> bool:
        return self.a <= score <= self.b

    def to_list(self) -> List[int]:
        return [self.a, self.b]

    @classmethod
    def from_list(cls, values: Sequence[int]) -> "ScoreRange":
        if len(values) != 2:
            raise ScoreRangeError(f"分数区间应为 [a, b]，实际为 {values}")
        return cls(int(values[0]), int(values[1]))


@dataclass(frozen=True)
class BetaParams:
    """Beta(α, β) 参数。"""

    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0 and math.isfinite(self.alpha) and math.isfinite(self.beta)):
            raise BetaFitError(f"Beta 参数必须为正有限值: ({self.alpha}, {self.beta})")
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "beta", float(self.beta))

    @property
    def mean(self) -> float:
        return self.alpha / (self.alpha + self.beta)

    @property
    def variance(self) -> float:
        total = self.alpha + self.beta
        return self.alpha * self.beta / (total * total * (total + 1.0))


@dataclass(frozen=True, eq=False)
class DiscretePrior:
    """目标域类别上的离散先验 q(y)。"""

    probs: np.ndarray
    range: ScoreRange

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64)
        if probs.shape != (self.range.n_classes,):
            raise ScoreRangeError(
                f"先验长度 {probs.shape} 与目标类别数 {self.range.n_classes} 不一致"
            )
        if np.any(probs < 0) or abs(math.fsum(probs) - 1.0) > 1e-9:
            raise DistributionError(f"先验不是合法的概率向量: {probs}")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def uniform(cls, target: ScoreRange) -> "DiscretePrior":
        c = target.n_classes
        return cls(np.full(c, 1.0 / c), target)

    def __len__(self) -> int:
        return len(self.probs)


@dataclass(frozen=True)
class SourceStatistics:
    """源数据集删除后仍保留的统计量，不含原始分数。"""

    source_id: str
    range: ScoreRange
    params: BetaParams
    n: int

    def to_dict(self) -> dict:
        return {
            "source_id": self.source_id,
            "range": self.range.to_list(),
            "alpha": self.params.alpha,
            "beta": self.params.beta,
            "n": self.n,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SourceStatistics":
        return cls(
            source_id=str(payload["source_id"]),
            range=ScoreRange.from_list(payload["range"]),
            params=BetaParams(payload["alpha"], payload["beta"]),
            n=int(payload["n"]),
        )


def scale_scores(scores: Sequence[int], score_range: ScoreRange) -> np.ndarray:
    """ỹ = (y - a + 0.5) / (b - a + 1)，输出严格落在 (0, 1) 内。"""
    values = np.asarray(scores)
    if values.size and (values.min() < score_range.a or values.max() > score_range.b):
        raise ScoreRangeError(
            f"分数超出区间 [{score_range.a}, {score_range.b}]: "
            f"min={values.min()}, max={values.max()}"
        )
    return (values.astype(np.float64) - score_range.a + 0.5) / score_range.n_classes


def beta_log_likelihood(scaled: np.ndarray, params: BetaParams) -> float:
    """平均对数密度 E[log Beta(ỹ; α, β)]。"""
    x = np.asarray(scaled, dtype=np.float64)
    return _mean_log_likelihood(
        params.alpha, params.beta, float(np.mean(np.log(x))), float(np.mean(np.log1p(-x)))
    )


def _mean_log_likelihood(alpha: float, beta: float, mean_log_x: float, mean_log_1mx: float) -> float:
    return (alpha - 1.0) * mean_log_x + (beta - 1.0) * mean_log_1mx - special.betaln(alpha, beta)


def _method_of_moments(x: np.ndarray) -> Tuple[float, float]:
    mean = float(np.mean(x))
    var = float(np.var(x))
    common = mean * (1.0 - mean) / var - 1.0
    alpha = float(np.clip(mean * common, PARAM_MIN, PARAM_MAX))
    beta = float(np.clip((1.0 - mean) * common, PARAM_MIN, PARAM_MAX))
    return alpha, beta


def fit_beta_mle(scaled: Sequence[float]) -> BetaParams:
    """
    Beta 分布最大似然估计。

    以矩估计为初值，对 digamma 驻点方程做 Newton 迭代并回溯步长，
    参数限制在 [1e-3, 1e6]，步长小于 1e-8 视为收敛。

    Args:
        scaled: 缩放到 (0, 1) 的分数

    Returns:
        拟合得到的 BetaParams
    """
    x = np.asarray(scaled, dtype=np.float64)
    if x.size < 2:
        raise BetaFitError(f"至少需要 2 个样本，实际 {x.size} 个")
    if np.any((x <= 0) | (x >= 1)):
        raise BetaFitError("样本必须严格位于 (0, 1) 内")
    if np.all(x == x[0]):
        raise BetaFitError("样本全部相同，无法拟合 Beta 分布")

    mean_log_x = float(np.mean(np.log(x)))
    mean_log_1mx = float(np.mean(np.log1p(-x)))

    def loglik(theta: np.ndarray) -> float:
        return _mean_log_likelihood(theta[0], theta[1], mean_log_x, mean_log_1mx)

    theta = np.array(_method_of_moments(x))
    current = loglik(theta)

    for iteration in range(1, MLE_MAX_ITER + 1):
        alpha, beta = theta
        psi_total = special.digamma(alpha + beta)
        grad = np.array([
            mean_log_x - special.digamma(alpha) + psi_total,
            mean_log_1mx - special.digamma(beta) + psi_total,
        ])
        trigamma_total = special.polygamma(1, alpha + beta)
        hess = np.array([
            [trigamma_total - special.polygamma(1, alpha), trigamma_total],
            [trigamma_total, trigamma_total - special.polygamma(1, beta)],
        ])
        try:
            step = -np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = grad

        # 回溯：对数似然不下降才接受
        t = 1.0
        accepted = False
        while t > 1e-12:
            candidate = np.clip(theta + t * step, PARAM_MIN, PARAM_MAX)
            value = loglik(candidate)
            if np.isfinite(value) and value >= current:
                accepted = True
                break
            t *= 0.5

        if not accepted:
            logger.debug(f"Beta MLE 第 {iteration} 轮无法继续改进，停止于 {theta}")
            return BetaParams(theta[0], theta[1])

        moved = float(np.max(np.abs(candidate - theta)))
        theta, current = candidate, value
        if moved < MLE_STEP_TOL:
            logger.debug(f"Beta MLE 在第 {iteration} 轮收敛: α={theta[0]:.6g}, β={theta[1]:.6g}")
            return BetaParams(theta[0], theta[1])

    raise BetaConvergenceError(
        f"Beta MLE 在 {MLE_MAX_ITER} 轮内未收敛", best=BetaParams(theta[0], theta[1])
    )


def unify_betas(params: Sequence[BetaParams]) -> BetaParams:
    """
    把等权 Beta 混合矩匹配为单个 Beta。

    μ = mean(μ_j)，σ² = mean(σ_j² + μ_j²) - μ²，
    α_S = μ(μ(1-μ)/σ² - 1)，β_S = (1-μ)(μ(1-μ)/σ² - 1)。
    """
    if not params:
        raise BetaFitError("至少需要一个 Beta 分布")
    m = len(params)
    mu = math.fsum(p.mean for p in params) / m
    second = math.fsum(p.variance + p.mean * p.mean for p in params) / m
    var = second - mu * mu
    if not var > 0 or mu * (1.0 - mu) / var <= 1.0:
        raise MomentFeasibilityError(f"混合分布矩不可行: μ={mu}, σ²={var}")
    common = mu * (1.0 - mu) / var - 1.0
    return BetaParams(mu * common, (1.0 - mu) * common)


def discretize(prior: BetaParams, target: ScoreRange) -> DiscretePrior:
    """q_c = I(c/C_T; α, β) - I((c-1)/C_T; α, β)，I 为正则化不完全 Beta 函数。"""
    c = target.n_classes
    edges = np.arange(c + 1, dtype=np.float64) / c
    cdf = special.betainc(prior.alpha, prior.beta, edges)
    if not np.all(np.isfinite(cdf)):
        raise NumericError(f"不完全 Beta 函数求值失败: α={prior.alpha}, β={prior.beta}")
    probs = np.maximum(np.diff(cdf), 0.0)
    return DiscretePrior(probs, target)


def build_prior(stats: Sequence[SourceStatistics], target: ScoreRange) -> DiscretePrior:
    """统一各源域 Beta 后离散化到目标域区间。"""
    unified = unify_betas([s.params for s in stats])
    logger.debug(f"统一先验 Beta({unified.alpha:.4g}, {unified.beta:.4g})，目标区间 {target.to_list()}")
    return discretize(unified, target)


def compute_source_statistics(
    source_id: str, scores: Sequence[int], score_range: ScoreRange
) -> SourceStatistics:
    """缩放源域分数并拟合 Beta，只保留区间、参数与样本数。"""
    scaled = scale_scores(scores, score_range)
    try:
        params = fit_beta_mle(scaled)
    except BetaConvergenceError as e:
        logger.warning(f"源域 {source_id} 的 Beta MLE 未收敛，使用最优迭代值: {e.best}")
        params = e.best
    return SourceStatistics(source_id, score_range, params, int(len(scaled)))


def save_statistics(stats: SourceStatistics, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(stats.to_dict(), ensure_ascii=False, indent=2), encoding="utf-8")
    return path


def load_statistics(path: PathLike) -> SourceStatistics:
    with open(path, encoding="utf-8") as f:
        return SourceStatistics.from_dict(json.load(f))
