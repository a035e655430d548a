# Copyright (c) 2025
# 模型合并自适应 - 合成多域数据

"""合成的多域打分数据。

每个域：特征 x ~ N(m_j, I)，潜在质量 u = sigmoid(k·(w_jᵀx + 噪声))，
按域的分数区间等宽离散化得到整数分数。
源域概念 w_j 由共同概念 w_0 加扰动得到，目标概念是若干源域概念的混合再加一个新偏移。
对抗源域的概念与目标概念反向，并且依赖一个只有它使用的干扰方向 v；
目标域特征沿 v 整体平移，于是对抗源域在目标域上的预测整体偏向高分。
"""

import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from scipy import linalg, special

from .env_helper import ExperimentConfig
from .score_prior import ScoreRange
from .scoring_model import LabeledSet

logger = logging.getLogger(__name__)

# 令 sigmoid(k·z) 在 z ~ N(0,1) 时近似均匀
LATENT_SCALE = 1.7


@dataclass(frozen=True, eq=False)
class DomainConcepts:
    base: np.ndarray
    sources: np.ndarray
    target: np.ndarray
    source_offsets: np.ndarray
    target_offset: np.ndarray
    nuisance: np.ndarray


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


def _orthogonal_direction(span: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """与 span 各行都正交的随机单位向量；正交补为空时返回零向量。"""
    complement = linalg.null_space(span)
    if complement.shape[1] == 0:
        return np.zeros(span.shape[1])
    return _unit(complement @ rng.standard_normal(complement.shape[1]))


def make_concepts(cfg: ExperimentConfig, rng: np.random.Generator) -> DomainConcepts:
    d = cfg.dim
    base = _unit(rng.standard_normal(d))

    def noise() -> np.ndarray:
        return rng.standard_normal(d) / np.sqrt(d)

    adversarial = set(cfg.adversarial_sources)
    benign = [j for j in range(cfg.n_sources) if j not in adversarial]
    sources = np.zeros((cfg.n_sources, d))
    for j in benign:
        sources[j] = _unit(base + cfg.concept_perturbation * noise())
    target = _unit(sources[cfg.target_sources].mean(axis=0) + cfg.target_novelty * noise())

    nuisance = np.zeros(d)
    if adversarial:
        nuisance = _orthogonal_direction(np.vstack([base, sources[benign], target]), rng)
    for j in sorted(adversarial):
        sources[j] = _unit(-target + nuisance + cfg.concept_perturbation * noise())

    source_offsets = np.stack([cfg.mean_shift * base + cfg.offset_noise * noise() for _ in range(cfg.n_sources)])
    target_offset = cfg.mean_shift * base + cfg.offset_noise * noise() + cfg.adversarial_shift * nuisance
    return DomainConcepts(base, sources, target, source_offsets, target_offset, nuisance)


def sample_domain(
    concept: np.ndarray,
    offset: np.ndarray,
    n: int,
    score_range: ScoreRange,
    label_noise: float,
    rng: np.random.Generator,
    domain: str,
) -> LabeledSet:
    """按概念向量与特征均值偏移生成一个域的带标签样本。"""
    features = offset + rng.standard_normal((n, concept.shape[0]))
    latent = features @ concept + label_noise * rng.standard_normal(n)
    quality = special.expit(LATENT_SCALE * latent)
    c = score_range.n_classes
    classes = np.minimum(np.floor(quality * c).astype(np.int64), c - 1)
    return LabeledSet(features, score_range.a + classes, score_range, domain)


def gen_domains(cfg: ExperimentConfig) -> Tuple[List[LabeledSet], LabeledSet]:
    """
    生成源域与目标域。目标域标签只用于评估。

    Args:
        cfg: 实验配置

    Returns:
        (源域列表, 目标域)
    """
    rng = np.random.default_rng(cfg.seed)
    concepts = make_concepts(cfg, rng)

    sources = []
    for j in range(cfg.n_sources):
        sources.append(sample_domain(
            concepts.sources[j],
            concepts.source_offsets[j],
            cfg.n_samples,
            ScoreRange.from_list(cfg.source_ranges[j]),
            cfg.label_noise,
            rng,
            f"source_{j}",
        ))

    target = sample_domain(
        concepts.target,
        concepts.target_offset,
        cfg.target_samples or cfg.n_samples,
        ScoreRange.from_list(cfg.target_range),
        cfg.label_noise,
        rng,
        "target",
    )

    alignment = ", ".join(f"{float(w @ concepts.target):+.2f}" for w in concepts.sources)
    logger.info(f"已生成 {cfg.n_sources} 个源域与 1 个目标域，源概念与目标概念的余弦: [{alignment}]")
    return sources, target
