# Copyright (c) 2025
# 模型合并自适应 - 评估指标

"""Quadratic Weighted Kappa 与分布到整数分数的解码。"""

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateRatingsError, ScoreRangeError
from .score_prior import ScoreRange

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RatingPair:
    human: int
    predicted: int
    range: ScoreRange

    def __post_init__(self):
        if not (self.range.contains(self.human) and self.range.contains(self.predicted)):
            raise ScoreRangeError(
                f"评分 ({self.human}, {self.predicted}) 超出区间 {self.range.to_list()}"
            )


class QwkAccumulator:
    """
    流式累积观测矩阵 O，value() 与一次性计算的 qwk 完全一致。

    Args:
        score_range: 两个评分者共享的分数区间
    """

    def __init__(self, score_range: ScoreRange):
        self.range = score_range
        c = score_range.n_classes
        self.counts = np.zeros((c, c), dtype=np.int64)

    def update(self, human: Sequence[int], predicted: Sequence[int]) -> "QwkAccumulator":
        h = np.asarray(human, dtype=np.int64)
        p = np.asarray(predicted, dtype=np.int64)
        if h.shape != p.shape:
            raise ScoreRangeError(f"评分长度不一致: {h.shape} vs {p.shape}")
        for values in (h, p):
            if values.size and (values.min() < self.range.a or values.max() > self.range.b):
                raise ScoreRangeError(f"评分超出区间 {self.range.to_list()}")
        np.add.at(self.counts, (h - self.range.a, p - self.range.a), 1)
        return self

    def add(self, pair: RatingPair) -> "QwkAccumulator":
        return self.update([pair.human], [pair.predicted])

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def value(self) -> float:
        """κ = 1 - Σw·O / Σw·E，w_ij = (i-j)²/(C-1)²。O 为对角阵时返回 1。"""
        if self.total == 0:
            raise DegenerateRatingsError("没有评分样本")
        c = self.range.n_classes
        observed = self.counts.astype(np.float64)
        idx = np.arange(c)
        weights = (idx[:, None] - idx[None, :]) ** 2 / float((c - 1) ** 2)
        numerator = float((weights * observed).sum())
        if numerator == 0.0:
            return 1.0
        expected = np.outer(observed.sum(axis=1), observed.sum(axis=0)) / self.total
        denominator = float((weights * expected).sum())
        if denominator == 0.0:
            raise DegenerateRatingsError("期望不一致度为零，QWK 无定义")
        return 1.0 - numerator / denominator


def qwk(pairs: Sequence[RatingPair]) -> float:
    """二次加权 Kappa，所有评分对必须共享同一分数区间。"""
    if not pairs:
        raise DegenerateRatingsError("评分对列表为空")
    score_range = pairs[0].range
    if any(p.range != score_range for p in pairs):
        raise ScoreRangeError("评分对的分数区间不一致")
    return QwkAccumulator(score_range).update(
        [p.human for p in pairs], [p.predicted for p in pairs]
    ).value()


def qwk_from_scores(human: Sequence[int], predicted: Sequence[int], score_range: ScoreRange) -> float:
    if len(human) == 0:
        raise DegenerateRatingsError("评分列表为空")
    return QwkAccumulator(score_range).update(human, predicted).value()


def score_from_distribution(d: np.ndarray, score_range: ScoreRange) -> int:
    """argmax 类别映射回分数 a + index，平票取较低分。"""
    return score_range.a + int(np.argmax(np.asarray(d)))


def scores_from_distributions(dists: np.ndarray, score_range: ScoreRange) -> np.ndarray:
    return score_range.a + np.argmax(np.asarray(dists), axis=1)
