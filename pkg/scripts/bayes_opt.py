# Copyright (c) 2025
# 模型合并自适应 - 贝叶斯优化

"""高斯过程 + Expected Improvement 的黑盒最大化。

零均值先验，Matérn-2.5 核。每轮在对数网格上按边际似然重新选择 (ℓ, s²)，
在 Sobol 候选点上评估 EI，再对最好的若干候选逐坐标做有界一维搜索。
"""

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
from scipy import linalg, stats
from scipy.optimize import minimize_scalar
from scipy.stats import qmc
from scipy.spatial.distance import cdist

from .errors import ConditioningError, ObjectiveEvaluationError, StructuralError
from .pim_objective import ObjectiveValue

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SQRT5 = math.sqrt(5.0)
JITTER_START = 1e-8
JITTER_MAX = 1e-2
GRID_SIZE = 32
LENGTH_SCALE_RANGE = (0.05, 5.0)
SIGNAL_VARIANCE_RANGE = (0.01, 100.0)

Objective = Callable[[np.ndarray], ObjectiveValue]


def _matern25_from_distance(d: np.ndarray, length_scale: float, signal_variance: float) -> np.ndarray:
    r = SQRT5 * d / length_scale
    return signal_variance * (1.0 + r + r * r / 3.0) * np.exp(-r)


def kernel_matern25(a: np.ndarray, b: np.ndarray, length_scale: float, signal_variance: float) -> float:
    """s²(1 + √5 d/ℓ + 5d²/(3ℓ²))·exp(-√5 d/ℓ)，d = ‖a - b‖₂。"""
    d = float(np.linalg.norm(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)))
    return float(_matern25_from_distance(np.float64(d), length_scale, signal_variance))


@dataclass(frozen=True, eq=False)
class GpModel:
    """
    已拟合的零均值 GP，缓存 Gram 矩阵的 Cholesky 因子。

    用 GpModel.fit 构造：jitter 从给定值开始，Cholesky 失败时按 ×10 升级到 1e-2。
    """

    X: np.ndarray
    y: np.ndarray
    length_scale: float
    signal_variance: float
    jitter: float
    cholesky: Tuple[np.ndarray, bool]
    weights: np.ndarray

    @classmethod
    def fit(
        cls,
        X: np.ndarray,
        y: np.ndarray,
        length_scale: float,
        signal_variance: float,
        jitter: float = JITTER_START,
    ) -> "GpModel":
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        y = np.asarray(y, dtype=np.float64).ravel()
        if X.shape[0] == 0 or X.shape[0] != y.shape[0]:
            raise StructuralError(f"观测点 {X.shape} 与观测值 {y.shape} 不匹配")
        if length_scale <= 0 or signal_variance <= 0:
            raise StructuralError(f"核超参数必须为正: ℓ={length_scale}, s²={signal_variance}")

        gram = _matern25_from_distance(cdist(X, X), length_scale, signal_variance)
        current = jitter
        while True:
            try:
                factor = linalg.cho_factor(gram + current * np.eye(len(y)), lower=True)
                break
            except linalg.LinAlgError:
                if current >= JITTER_MAX:
                    raise ConditioningError(
                        f"jitter 升级到 {current:g} 后 Cholesky 分解仍失败"
                    )
                current = min(current * 10.0, JITTER_MAX)
                logger.warning(f"Gram 矩阵病态，jitter 升级到 {current:g}")
        weights = linalg.cho_solve(factor, y)
        return cls(X, y, float(length_scale), float(signal_variance), current, factor, weights)

    @property
    def n_observations(self) -> int:
        return int(self.X.shape[0])

    def predict(self, queries: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """多个查询点的后验均值与方差。"""
        Q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        cross = _matern25_from_distance(cdist(Q, self.X), self.length_scale, self.signal_variance)
        mean = cross @ self.weights
        solved = linalg.cho_solve(self.cholesky, cross.T)
        variance = self.signal_variance - np.einsum("ij,ji->i", cross, solved)
        return mean, np.maximum(variance, 0.0)


def gp_posterior(model: GpModel, query: np.ndarray) -> Tuple[float, float]:
    """单点后验 (均值, 方差)，方差截断到非负。"""
    mean, variance = model.predict(np.asarray(query, dtype=np.float64)[None, :])
    return float(mean[0]), float(variance[0])


def hyperparameter_grid(size: int = GRID_SIZE) -> Tuple[np.ndarray, np.ndarray]:
    return (
        np.geomspace(*LENGTH_SCALE_RANGE, size),
        np.geomspace(*SIGNAL_VARIANCE_RANGE, size),
    )


def fit_hyperparameters(
    X: np.ndarray,
    y: np.ndarray,
    jitter: float = JITTER_START,
    grid_size: int = GRID_SIZE,
) -> Tuple[float, float]:
    """
    在对数网格上最大化对数边际似然，返回 (ℓ, s²)。

    对每个 ℓ 做一次特征分解 R = QΛQᵀ，则 s²R + jI 的行列式与二次型
    对整条 s² 轴都有闭式，不需要逐点 Cholesky。
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    n = len(y)
    distances = cdist(X, X)
    length_scales, signal_variances = hyperparameter_grid(grid_size)

    best = (-np.inf, float(length_scales[0]), float(signal_variances[0]))
    for length_scale in length_scales:
        correlation = _matern25_from_distance(distances, length_scale, 1.0)
        eigvals, eigvecs = np.linalg.eigh(correlation)
        projected = (eigvecs.T @ y) ** 2
        spectrum = signal_variances[:, None] * eigvals[None, :] + jitter
        valid = np.all(spectrum > 0, axis=1)
        safe = np.where(spectrum > 0, spectrum, 1.0)
        log_ml = -0.5 * (projected[None, :] / safe).sum(axis=1) - 0.5 * np.log(safe).sum(axis=1)
        log_ml -= 0.5 * n * math.log(2.0 * math.pi)
        log_ml = np.where(valid, log_ml, -np.inf)
        idx = int(np.argmax(log_ml))
        # 严格大于：平票时保留先出现的网格点
        if log_ml[idx] > best[0]:
            best = (float(log_ml[idx]), float(length_scale), float(signal_variances[idx]))

    logger.debug(f"GP 超参数: ℓ={best[1]:.4g}, s²={best[2]:.4g}, log ML={best[0]:.4g}")
    return best[1], best[2]


def expected_improvement(mean, variance, f_best: float, xi: float = 0.01):
    """
    EI = (μ - f* - ξ)Φ(z) + σφ(z)，z = (μ - f* - ξ)/σ；σ = 0 时退化为 max(μ - f* - ξ, 0)。

    mean / variance 可以是标量或数组。
    """
    mean = np.asarray(mean, dtype=np.float64)
    sigma = np.sqrt(np.maximum(np.asarray(variance, dtype=np.float64), 0.0))
    gain = mean - f_best - xi
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sigma > 0, gain / np.where(sigma > 0, sigma, 1.0), 0.0)
        ei = np.where(
            sigma > 0,
            gain * stats.norm.cdf(z) + sigma * stats.norm.pdf(z),
            np.maximum(gain, 0.0),
        )
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


@dataclass
class BoConfig:
    """贝叶斯优化配置，默认值取 10 个随机探测点 + 30 轮迭代，ξ = 0.01。"""

    bounds: List[Tuple[float, float]] = field(default_factory=lambda: [(0.0, 1.0)])
    n_init: int = 10
    n_iter: int = 30
    xi: float = 0.01
    seed: int = 0
    n_candidates: int = 4096
    n_restarts: int = 8

    def __post_init__(self):
        self.bounds = [(float(lo), float(hi)) for lo, hi in self.bounds]
        for lo, hi in self.bounds:
            if not lo < hi:
                raise StructuralError(f"边界非法: [{lo}, {hi}]")
        if self.n_init < 1 or self.n_iter < 0 or self.xi < 0:
            raise StructuralError(
                f"n_init={self.n_init}, n_iter={self.n_iter}, xi={self.xi} 不合法"
            )
        if self.n_candidates < 1 or self.n_restarts < 0:
            raise StructuralError("候选点数必须 ≥ 1，重启次数必须 ≥ 0")

    @classmethod
    def for_dimension(cls, dim: int, **kwargs) -> "BoConfig":
        lo, hi = kwargs.pop("box", (0.0, 1.0))
        return cls(bounds=[(lo, hi)] * dim, **kwargs)

    @property
    def dim(self) -> int:
        return len(self.bounds)

    @property
    def lower(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.bounds])

    @property
    def upper(self) -> np.ndarray:
        return np.array([hi for _, hi in self.bounds])

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["bounds"] = [list(b) for b in self.bounds]
        return payload


@dataclass
class BoIteration:
    """一次求值记录；posterior 为求值前在该点的 (μ, σ²)，随机探测点为 None。"""

    coefficients: np.ndarray
    objective: ObjectiveValue
    posterior: Optional[Tuple[float, float]]
    best: float

    def to_dict(self) -> dict:
        return {
            "lambda": [float(v) for v in self.coefficients],
            "objective": self.objective.to_dict(),
            "posterior": (
                None if self.posterior is None
                else {"mean": self.posterior[0], "var": self.posterior[1]}
            ),
            "best": self.best,
        }


@dataclass
class BoTrace:
    config: BoConfig
    iterations: List[BoIteration] = field(default_factory=list)
    method: str = "bayes_opt"
    hyperparameters: List[Tuple[float, float]] = field(default_factory=list)

    def record(
        self,
        coefficients: np.ndarray,
        objective: ObjectiveValue,
        posterior: Optional[Tuple[float, float]] = None,
    ) -> BoIteration:
        best = objective.total if not self.iterations else max(self.best_value, objective.total)
        item = BoIteration(np.array(coefficients, dtype=np.float64), objective, posterior, best)
        self.iterations.append(item)
        return item

    def __len__(self) -> int:
        return len(self.iterations)

    @property
    def best_index(self) -> int:
        if not self.iterations:
            raise StructuralError("轨迹为空")
        values = [it.objective.total for it in self.iterations]
        # np.argmax 在平票时返回最早的下标
        return int(np.argmax(values))

    @property
    def best_value(self) -> float:
        return self.iterations[-1].best

    @property
    def lambda_star(self) -> np.ndarray:
        return self.iterations[self.best_index].coefficients.copy()

    def observations(self) -> Tuple[np.ndarray, np.ndarray]:
        X = np.array([it.coefficients for it in self.iterations])
        y = np.array([it.objective.total for it in self.iterations])
        return X, y

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "config": self.config.to_dict(),
            "iterations": [it.to_dict() for it in self.iterations],
            "hyperparameters": [list(h) for h in self.hyperparameters],
            "lambda_star": [float(v) for v in self.lambda_star] if self.iterations else None,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "BoTrace":
        config_payload = dict(payload["config"])
        config_payload["bounds"] = [tuple(b) for b in config_payload["bounds"]]
        trace = cls(BoConfig(**config_payload), method=payload.get("method", "bayes_opt"))
        trace.hyperparameters = [tuple(h) for h in payload.get("hyperparameters", [])]
        for item in payload["iterations"]:
            posterior = item.get("posterior")
            trace.iterations.append(BoIteration(
                np.array(item["lambda"], dtype=np.float64),
                ObjectiveValue.from_dict(item["objective"]),
                None if posterior is None else (posterior["mean"], posterior["var"]),
                float(item["best"]),
            ))
        return trace


def _sobol_candidates(cfg: BoConfig, rng: np.random.Generator) -> np.ndarray:
    sampler = qmc.Sobol(d=cfg.dim, scramble=True, seed=rng)
    with warnings.catch_warnings():
        # 非 2 的幂次时 Sobol 会提示平衡性下降
        warnings.simplefilter("ignore")
        unit = sampler.random(cfg.n_candidates)
    return qmc.scale(unit, cfg.lower, cfg.upper)


def _refine(model: GpModel, start: np.ndarray, f_best: float, cfg: BoConfig) -> Tuple[np.ndarray, float]:
    """逐坐标有界一维搜索（golden-section + 抛物插值），只接受改进。"""
    point = start.copy()
    value = float(expected_improvement(*gp_posterior(model, point), f_best, cfg.xi))
    for i, (lo, hi) in enumerate(cfg.bounds):
        def negative_ei(t: float) -> float:
            trial = point.copy()
            trial[i] = t
            return -float(expected_improvement(*gp_posterior(model, trial), f_best, cfg.xi))

        result = minimize_scalar(negative_ei, bounds=(lo, hi), method="bounded",
                                 options={"xatol": 1e-4})
        if result.success and -result.fun > value:
            point[i] = float(np.clip(result.x, lo, hi))
            value = -float(result.fun)
    return point, value


def propose_next(
    model: GpModel,
    cfg: BoConfig,
    f_best: Optional[float] = None,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """
    近似 EI 的最大值点。

    Args:
        model: 已拟合的 GP
        cfg: 优化配置
        f_best: 当前最优值，默认取观测最大值
        rng: 随机数生成器，默认由 cfg.seed 构造

    Returns:
        边界内的下一个查询点
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    f_best = float(np.max(model.y)) if f_best is None else f_best

    candidates = _sobol_candidates(cfg, rng)
    mean, variance = model.predict(candidates)
    scores = expected_improvement(mean, variance, f_best, cfg.xi)
    order = np.argsort(-scores, kind="stable")

    best_point, best_value = candidates[order[0]].copy(), float(scores[order[0]])
    for idx in order[:cfg.n_restarts]:
        try:
            point, value = _refine(model, candidates[idx], f_best, cfg)
        except (ValueError, FloatingPointError) as e:
            logger.warning(f"EI 局部搜索失败，保留候选点: {e}")
            continue
        if value > best_value:
            best_point, best_value = point, value
    return np.clip(best_point, cfg.lower, cfg.upper)


def _evaluate(f: Objective, point: np.ndarray, trace: BoTrace) -> ObjectiveValue:
    try:
        value = f(point.copy())
    except Exception as e:
        raise ObjectiveEvaluationError(f"第 {len(trace) + 1} 次目标函数求值失败: {e}", trace=trace) from e
    if not math.isfinite(value.total):
        raise ObjectiveEvaluationError(f"第 {len(trace) + 1} 次目标函数返回非有限值", trace=trace)
    return value


def _random_point(cfg: BoConfig, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(cfg.lower, cfg.upper)


def optimize(f: Objective, cfg: BoConfig) -> BoTrace:
    """
    先评估 n_init 个均匀随机点，再做 n_iter 轮“拟合 GP -> 最大化 EI -> 求值”。

    Args:
        f: 黑盒目标 λ -> ObjectiveValue，整个过程中必须是确定性的
        cfg: 优化配置

    Returns:
        BoTrace，lambda_star 为全部求值中的最大值点（平票取最早）
    """
    rng = np.random.default_rng(cfg.seed)
    trace = BoTrace(cfg, method="bayes_opt")

    for _ in range(cfg.n_init):
        point = _random_point(cfg, rng)
        trace.record(point, _evaluate(f, point, trace))

    for step in range(cfg.n_iter):
        X, y = trace.observations()
        length_scale, signal_variance = fit_hyperparameters(X, y)
        model = GpModel.fit(X, y, length_scale, signal_variance)
        trace.hyperparameters.append((length_scale, signal_variance))

        point = propose_next(model, cfg, f_best=trace.best_value, rng=rng)
        posterior = gp_posterior(model, point)
        item = trace.record(point, _evaluate(f, point, trace), posterior)
        logger.debug(
            f"BO 第 {step + 1}/{cfg.n_iter} 轮: f={item.objective.total:.6f}, "
            f"best={item.best:.6f}, μ={posterior[0]:.4f}, σ²={posterior[1]:.3g}"
        )

    logger.info(f"贝叶斯优化完成: {len(trace)} 次求值, 最优 f={trace.best_value:.6f}")
    return trace


def random_search(f: Objective, cfg: BoConfig) -> BoTrace:
    """n_init + n_iter 次均匀随机求值，轨迹格式与 optimize 相同。"""
    rng = np.random.default_rng(cfg.seed)
    trace = BoTrace(cfg, method="random_search")
    for _ in range(cfg.n_init + cfg.n_iter):
        point = _random_point(cfg, rng)
        trace.record(point, _evaluate(f, point, trace))
    logger.info(f"随机搜索完成: {len(trace)} 次求值, 最优 f={trace.best_value:.6f}")
    return trace


def save_trace(trace: BoTrace, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(trace.to_dict(), ensure_ascii=False, indent=2), encoding="utf-8")
    return path


def load_trace(path: PathLike) -> BoTrace:
    with open(path, encoding="utf-8") as f:
        return BoTrace.from_dict(json.load(f))
