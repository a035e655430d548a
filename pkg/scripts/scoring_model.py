# Copyright (c) 2025
# 模型合并自适应 - 概率评分模型

"""玩具概率评分器及其低秩微调。

评分器参数为 W (C_max×D) 与 b (C_max×1)，所有域共享 C_max 个 logit，
预测时截断到目标域的前 C_T 个类别并重新归一化。
源域训练只更新低秩因子 W += s·B·A 以及偏置，基座参数冻结。
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from .errors import ScoreRangeError, StructuralError, TrainingDivergenceError
from .param_algebra import LowRankUpdate, MergeSpec, ParamSet, TaskVector, merge
from .score_prior import ScoreRange

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

WEIGHT_LAYER = "W"
BIAS_LAYER = "b"


@dataclass(frozen=True, eq=False)
class LabeledSet:
    """一个域的样本。目标域的 scores 为 None。"""

    features: np.ndarray
    scores: Optional[np.ndarray]
    range: ScoreRange
    domain: str

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64)
        if features.ndim != 2:
            raise StructuralError(f"特征必须是 N×D 矩阵，实际维度 {features.ndim}")
        if not np.all(np.isfinite(features)):
            raise StructuralError(f"域 {self.domain} 的特征含非有限值")
        object.__setattr__(self, "features", features)
        if self.scores is not None:
            scores = np.array(self.scores, dtype=np.int64)
            if scores.shape != (features.shape[0],):
                raise StructuralError(f"分数个数 {scores.shape} 与样本数 {features.shape[0]} 不一致")
            if scores.size and (scores.min() < self.range.a or scores.max() > self.range.b):
                raise ScoreRangeError(f"域 {self.domain} 的分数超出区间 {self.range.to_list()}")
            object.__setattr__(self, "scores", scores)

    def __len__(self) -> int:
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def class_indices(self) -> np.ndarray:
        if self.scores is None:
            raise StructuralError(f"域 {self.domain} 没有标签")
        return self.scores - self.range.a

    def unlabeled(self) -> "LabeledSet":
        return LabeledSet(self.features, None, self.range, self.domain)


@dataclass(frozen=True, eq=False)
class ProbScorer:
    """p(y|x) = softmax(Wx + b) 截断到前 C_T 个类别后归一化。"""

    params: ParamSet
    active_classes: int

    def __post_init__(self):
        names = set(self.params.names)
        if names != {WEIGHT_LAYER, BIAS_LAYER}:
            raise StructuralError(f"评分器需要层 W 和 b，实际为 {sorted(names)}")
        c_max = self.params[WEIGHT_LAYER].shape[0]
        if self.params[BIAS_LAYER].shape != (c_max, 1):
            raise StructuralError(f"偏置形状应为 ({c_max}, 1)")
        if not 2 <= self.active_classes <= c_max:
            raise StructuralError(f"有效类别数 {self.active_classes} 超出 [2, {c_max}]")

    @property
    def dim(self) -> int:
        return int(self.params[WEIGHT_LAYER].shape[1])

    @property
    def n_classes_max(self) -> int:
        return int(self.params[WEIGHT_LAYER].shape[0])

    @classmethod
    def merged(
        cls,
        base: ParamSet,
        tvs: Sequence[TaskVector],
        spec: MergeSpec,
        active_classes: int,
    ) -> "ProbScorer":
        return cls(merge(base, tvs, spec), active_classes)


@dataclass
class TrainConfig:
    """源域低秩微调的超参数。"""

    rank: int = 4
    lora_alpha: Optional[float] = None
    learning_rate: float = 0.1
    max_steps: int = 2000
    tol: float = 1e-9
    init_scale: Optional[float] = None
    seed: int = 0

    @property
    def scaling(self) -> float:
        alpha = self.rank if self.lora_alpha is None else self.lora_alpha
        return float(alpha) / self.rank


def init_base_params(n_classes_max: int, dim: int, seed: int = 0, scale: float = 0.01) -> ParamSet:
    """固定种子的小随机基座参数（预训练模型的替身）。"""
    rng = np.random.default_rng(seed)
    return ParamSet((
        (WEIGHT_LAYER, scale * rng.standard_normal((n_classes_max, dim))),
        (BIAS_LAYER, np.zeros((n_classes_max, 1))),
    ))


def _truncated_softmax(logits: np.ndarray, active_classes: int) -> np.ndarray:
    # 对全部 logit 做 softmax 再截断归一化，与直接对前 C_T 个 logit 做 softmax 等价
    return special.softmax(logits[..., :active_classes], axis=-1)


def predict(scorer: ProbScorer, x: np.ndarray) -> np.ndarray:
    """单个样本的分数分布，长度为 C_T。"""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (scorer.dim,):
        raise StructuralError(f"特征维度 {x.shape} 与评分器维度 {scorer.dim} 不一致")
    logits = scorer.params[WEIGHT_LAYER] @ x + scorer.params[BIAS_LAYER][:, 0]
    return _truncated_softmax(logits, scorer.active_classes)


def batch_predict(scorer: ProbScorer, xs: Union[np.ndarray, Sequence[np.ndarray]]) -> np.ndarray:
    """逐样本预测，保持顺序；返回 N×C_T 矩阵。"""
    if len(xs) == 0:
        return np.zeros((0, scorer.active_classes))
    matrix = np.asarray(xs, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[1] != scorer.dim:
        raise StructuralError(f"特征矩阵形状 {matrix.shape} 与评分器维度 {scorer.dim} 不一致")
    logits = matrix @ scorer.params[WEIGHT_LAYER].T + scorer.params[BIAS_LAYER][:, 0]
    return _truncated_softmax(logits, scorer.active_classes)


@dataclass
class LowRankFactors:
    """训练中的可变状态：W 的低秩因子与偏置增量。"""

    B: np.ndarray
    A: np.ndarray
    bias: np.ndarray

    def copy(self) -> "LowRankFactors":
        return LowRankFactors(self.B.copy(), self.A.copy(), self.bias.copy())


def _pool(datasets: Sequence[LabeledSet]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """拼接多个域：特征、类别下标、每个样本的有效类别数。"""
    features = np.vstack([d.features for d in datasets])
    targets = np.concatenate([d.class_indices for d in datasets])
    active = np.concatenate([np.full(len(d), d.range.n_classes) for d in datasets])
    return features, targets, active


def factor_loss_and_grads(
    base: ParamSet,
    datasets: Sequence[LabeledSet],
    factors: LowRankFactors,
    scaling: float = 1.0,
) -> Tuple[float, Dict[str, np.ndarray]]:
    """
    平均交叉熵及其对 B、A、偏置的梯度。

    每个样本只在其所属域的前 C 个 logit 上做 softmax，其余 logit 梯度为零。
    """
    features, targets, active = _pool(datasets)
    n = features.shape[0]
    c_max = base[WEIGHT_LAYER].shape[0]

    weight = base[WEIGHT_LAYER] + scaling * factors.B @ factors.A
    logits = features @ weight.T + (base[BIAS_LAYER][:, 0] + factors.bias)

    columns = np.arange(c_max)
    masked = np.where(columns[None, :] < active[:, None], logits, -np.inf)
    log_probs = masked - special.logsumexp(masked, axis=1, keepdims=True)
    loss = -float(np.mean(log_probs[np.arange(n), targets]))

    residual = np.exp(log_probs)
    residual[np.arange(n), targets] -= 1.0
    residual /= n

    grad_weight = residual.T @ features
    grads = {
        "B": scaling * grad_weight @ factors.A.T,
        "A": scaling * factors.B.T @ grad_weight,
        "bias": residual.sum(axis=0),
    }
    return loss, grads


def _init_factors(c_max: int, dim: int, cfg: TrainConfig) -> LowRankFactors:
    if not 1 <= cfg.rank <= min(c_max, dim):
        raise StructuralError(f"秩 {cfg.rank} 超出 [1, {min(c_max, dim)}]")
    rng = np.random.default_rng(cfg.seed)
    scale = 1.0 / np.sqrt(dim) if cfg.init_scale is None else cfg.init_scale
    # B 置零、A 随机，初始更新为零
    return LowRankFactors(
        B=np.zeros((c_max, cfg.rank)),
        A=scale * rng.standard_normal((cfg.rank, dim)),
        bias=np.zeros(c_max),
    )


def _to_task_vector(base: ParamSet, factors: LowRankFactors, scaling: float) -> TaskVector:
    updates = (
        LowRankUpdate(WEIGHT_LAYER, scaling * factors.B, factors.A),
        LowRankUpdate(BIAS_LAYER, factors.bias[:, None], np.ones((1, 1))),
    )
    return TaskVector(updates, base.fingerprint)


def train_joint(base: ParamSet, datasets: Sequence[LabeledSet], cfg: TrainConfig) -> TaskVector:
    """
    在若干域的合并样本上做全批量梯度下降，返回低秩任务向量。

    返回训练过程中损失最低的迭代，因此返回时损失不高于初始损失。

    Args:
        base: 冻结的基座参数
        datasets: 带标签的域
        cfg: 训练超参数

    Returns:
        W 为秩 r、偏置为秩 1 的 TaskVector
    """
    if not datasets:
        raise StructuralError("训练至少需要一个域")
    c_max, dim = base[WEIGHT_LAYER].shape
    for d in datasets:
        if d.dim != dim:
            raise StructuralError(f"域 {d.domain} 的特征维度 {d.dim} 与基座 {dim} 不一致")
        if d.range.n_classes > c_max:
            raise StructuralError(f"域 {d.domain} 的类别数 {d.range.n_classes} 超过 C_max={c_max}")

    factors = _init_factors(c_max, dim, cfg)
    scaling = cfg.scaling
    best, best_loss, previous = factors.copy(), np.inf, np.inf

    for step in range(cfg.max_steps + 1):
        loss, grads = factor_loss_and_grads(base, datasets, factors, scaling)
        if not np.isfinite(loss):
            raise TrainingDivergenceError(f"第 {step} 步损失为非有限值")
        if loss < best_loss:
            best, best_loss = factors.copy(), loss
        if abs(previous - loss) < cfg.tol or step == cfg.max_steps:
            break
        previous = loss
        factors.B -= cfg.learning_rate * grads["B"]
        factors.A -= cfg.learning_rate * grads["A"]
        factors.bias -= cfg.learning_rate * grads["bias"]

    domains = ",".join(d.domain for d in datasets)
    logger.debug(f"训练完成 [{domains}]: {step} 步, 损失 {best_loss:.6f}")
    return _to_task_vector(base, best, scaling)


def train_source(base: ParamSet, data: LabeledSet, cfg: TrainConfig) -> TaskVector:
    """单个源域的低秩微调。"""
    return train_joint(base, [data], cfg)


def save_labeled_set(data: LabeledSet, path: PathLike, with_scores: bool = True) -> Path:
    """JSONL：首行为 {"range", "dim"}，之后每行一个样本。"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"range": data.range.to_list(), "dim": data.dim})]
    for i in range(len(data)):
        y = int(data.scores[i]) if (with_scores and data.scores is not None) else None
        lines.append(json.dumps({"x": data.features[i].tolist(), "y": y, "domain": data.domain}))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_labeled_set(path: PathLike, domain: Optional[str] = None) -> LabeledSet:
    with open(path, encoding="utf-8") as f:
        rows = [json.loads(line) for line in f if line.strip()]
    if not rows:
        raise StructuralError(f"空的样本文件: {path}")
    header, samples = rows[0], rows[1:]
    dim = int(header["dim"])
    features = np.array([s["x"] for s in samples], dtype=np.float64).reshape(len(samples), dim)
    labels = [s["y"] for s in samples]
    scores = None if any(y is None for y in labels) else np.array(labels, dtype=np.int64)
    name = domain or (samples[0]["domain"] if samples else Path(path).stem)
    return LabeledSet(features, scores, ScoreRange.from_list(header["range"]), name)


def save_target_labels(data: LabeledSet, path: PathLike) -> Path:
    """目标域标签单独存放，只供评估阶段读取。"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"domain": data.domain, "range": data.range.to_list(), "y": data.scores.tolist()}
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


def load_target_labels(path: PathLike) -> np.ndarray:
    with open(path, encoding="utf-8") as f:
        return np.array(json.load(f)["y"], dtype=np.int64)
