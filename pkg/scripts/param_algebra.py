# Copyright (c) 2025
# 模型合并自适应 - 参数代数模块

"""参数集合、低秩任务向量与加权合并。

合并公式为 θ_mrg = θ_pre + Σ_j λ_j τ_j，其中每个 τ_j 以逐层低秩因子 (B, A) 存储，
合并时逐层累加 λ_j·(B_j A_j)，不物化零填充的稠密差分。
另外提供三个无需数据的合并基线：参数平均、Task Arithmetic、TIES-Merging。
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple, Union

import numpy as np

from .errors import StructuralError

logger = logging.getLogger(__name__)

# (层名, (行数, 列数))
LayerSignature = Tuple[str, Tuple[int, int]]
Fingerprint = Tuple[LayerSignature, ...]

PathLike = Union[str, Path]


def _as_matrix(data, name: str) -> np.ndarray:
    """转换为只读的 float64 二维矩阵。"""
    matrix = np.array(data, dtype=np.float64)
    if matrix.ndim != 2:
        raise StructuralError(f"层 {name} 必须是二维矩阵，实际维度 {matrix.ndim}")
    matrix.setflags(write=False)
    return matrix


@dataclass(frozen=True, eq=False)
class ParamSet:
    """有序的具名稠密矩阵集合（θ_pre、θ_j 或稠密差分）。"""

    layers: Tuple[Tuple[str, np.ndarray], ...]

    def __post_init__(self):
        converted = tuple((str(name), _as_matrix(data, name)) for name, data in self.layers)
        names = [name for name, _ in converted]
        if len(set(names)) != len(names):
            raise StructuralError(f"层名重复: {names}")
        object.__setattr__(self, "layers", converted)

    @classmethod
    def from_dict(cls, mapping: Mapping[str, np.ndarray]) -> "ParamSet":
        return cls(tuple(mapping.items()))

    @property
    def fingerprint(self) -> Fingerprint:
        return tuple((name, (int(m.shape[0]), int(m.shape[1]))) for name, m in self.layers)

    @property
    def names(self) -> List[str]:
        return [name for name, _ in self.layers]

    def __getitem__(self, name: str) -> np.ndarray:
        for layer_name, matrix in self.layers:
            if layer_name == name:
                return matrix
        raise KeyError(name)

    def to_dict(self) -> Dict[str, np.ndarray]:
        return dict(self.layers)

    def zeros_like(self) -> "ParamSet":
        return ParamSet(tuple((name, np.zeros_like(m)) for name, m in self.layers))


@dataclass(frozen=True, eq=False)
class LowRankUpdate:
    """单层的低秩更新 ΔW = B·A，B 为 m×r，A 为 r×n。"""

    name: str
    B: np.ndarray
    A: np.ndarray

    def __post_init__(self):
        B = _as_matrix(self.B, f"{self.name}.B")
        A = _as_matrix(self.A, f"{self.name}.A")
        if B.shape[1] != A.shape[0]:
            raise StructuralError(
                f"层 {self.name} 的因子形状不匹配: B {B.shape}, A {A.shape}"
            )
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "A", A)

    @property
    def rank(self) -> int:
        return int(self.B.shape[1])

    @property
    def shape(self) -> Tuple[int, int]:
        return int(self.B.shape[0]), int(self.A.shape[1])

    def dense(self) -> np.ndarray:
        return self.B @ self.A


@dataclass(frozen=True, eq=False)
class TaskVector:
    """相对某个基座参数集的低秩任务向量 τ_j。

    未出现在 updates 中的层贡献为零。rank 为各层内秩的最大值。
    """

    updates: Tuple[LowRankUpdate, ...]
    baseline_fingerprint: Fingerprint

    def __post_init__(self):
        updates = tuple(self.updates)
        fingerprint = tuple(
            (str(name), (int(shape[0]), int(shape[1]))) for name, shape in self.baseline_fingerprint
        )
        shapes = dict(fingerprint)
        seen = set()
        for update in updates:
            if update.name in seen:
                raise StructuralError(f"任务向量中层 {update.name} 重复")
            seen.add(update.name)
            if update.name not in shapes:
                raise StructuralError(f"基座中不存在层 {update.name}")
            if update.shape != shapes[update.name]:
                raise StructuralError(
                    f"层 {update.name} 的 B·A 形状 {update.shape} 与基座 {shapes[update.name]} 不一致"
                )
            if update.rank > min(update.shape) or update.rank < 1:
                raise StructuralError(
                    f"层 {update.name} 的秩 {update.rank} 超出 [1, {min(update.shape)}]"
                )
        object.__setattr__(self, "updates", updates)
        object.__setattr__(self, "baseline_fingerprint", fingerprint)

    @property
    def rank(self) -> int:
        return max((u.rank for u in self.updates), default=0)

    def update_map(self) -> Dict[str, LowRankUpdate]:
        return {u.name: u for u in self.updates}


@dataclass(frozen=True)
class MergeSpec:
    """合并系数 λ ∈ [lo, hi]^M。"""

    coefficients: Tuple[float, ...]
    bounds: Tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        coefficients = tuple(float(c) for c in self.coefficients)
        lo, hi = float(self.bounds[0]), float(self.bounds[1])
        if not lo <= hi:
            raise StructuralError(f"系数边界非法: ({lo}, {hi})")
        for c in coefficients:
            if not (math.isfinite(c) and lo <= c <= hi):
                raise StructuralError(f"系数 {c} 超出边界 [{lo}, {hi}]")
        object.__setattr__(self, "coefficients", coefficients)
        object.__setattr__(self, "bounds", (lo, hi))

    @classmethod
    def uniform(cls, n_sources: int, value: float, bounds: Tuple[float, float] = (0.0, 1.0)):
        return cls(tuple([value] * n_sources), bounds)

    def __len__(self) -> int:
        return len(self.coefficients)

    def to_dict(self) -> dict:
        return {"coefficients": list(self.coefficients), "bounds": list(self.bounds)}

    @classmethod
    def from_dict(cls, payload: dict) -> "MergeSpec":
        return cls(tuple(payload["coefficients"]), tuple(payload.get("bounds", (0.0, 1.0))))


def _check_compatible(base: ParamSet, tvs: Sequence[TaskVector]) -> None:
    fingerprint = base.fingerprint
    for idx, tv in enumerate(tvs):
        if tv.baseline_fingerprint != fingerprint:
            raise StructuralError(f"第 {idx} 个任务向量的结构签名与基座不一致")


def materialize_dense(tv: TaskVector) -> ParamSet:
    """把任务向量展开成与基座同形的稠密差分，未列出的层为零矩阵。"""
    updates = tv.update_map()
    layers = []
    for name, shape in tv.baseline_fingerprint:
        if name in updates:
            layers.append((name, updates[name].dense()))
        else:
            layers.append((name, np.zeros(shape, dtype=np.float64)))
    return ParamSet(tuple(layers))


def merge(base: ParamSet, tvs: Sequence[TaskVector], spec: MergeSpec) -> ParamSet:
    """
    计算 θ_pre + Σ_j λ_j τ_j。

    每层把 λ_j B_j 横向拼接、A_j 纵向拼接，一次矩阵乘法得到该层更新，
    没有适配器的层直接沿用基座参数。

    Args:
        base: 基座参数
        tvs: 任务向量列表
        spec: 合并系数

    Returns:
        合并后的参数集
    """
    if len(tvs) != len(spec):
        raise StructuralError(f"任务向量数 {len(tvs)} 与系数个数 {len(spec)} 不一致")
    _check_compatible(base, tvs)

    maps = [tv.update_map() for tv in tvs]
    layers = []
    for name, matrix in base.layers:
        left, right = [], []
        for coef, updates in zip(spec.coefficients, maps):
            update = updates.get(name)
            if update is None or coef == 0.0:
                continue
            left.append(coef * update.B)
            right.append(update.A)
        if left:
            layers.append((name, matrix + np.hstack(left) @ np.vstack(right)))
        else:
            layers.append((name, matrix.copy()))
    return ParamSet(tuple(layers))


def merge_average(base: ParamSet, tvs: Sequence[TaskVector]) -> ParamSet:
    """参数平均：基座相同时等价于 λ_j = 1/M。"""
    if not tvs:
        raise StructuralError("参数平均至少需要一个任务向量")
    return merge(base, tvs, MergeSpec.uniform(len(tvs), 1.0 / len(tvs)))


def merge_task_arithmetic(base: ParamSet, tvs: Sequence[TaskVector], scale: float = 0.4) -> ParamSet:
    """Task Arithmetic：所有任务向量使用同一缩放系数。"""
    lo = min(0.0, scale)
    hi = max(1.0, scale)
    return merge(base, tvs, MergeSpec.uniform(len(tvs), scale, bounds=(lo, hi)))


def flatten_delta(delta: ParamSet) -> np.ndarray:
    """按结构签名顺序把各层拼成一个向量。"""
    if not delta.layers:
        return np.zeros(0, dtype=np.float64)
    return np.concatenate([m.ravel() for _, m in delta.layers])


def unflatten_delta(vector: np.ndarray, fingerprint: Fingerprint) -> ParamSet:
    """flatten_delta 的逆操作。"""
    total = sum(m * n for _, (m, n) in fingerprint)
    if vector.shape != (total,):
        raise StructuralError(f"向量长度 {vector.shape} 与结构签名总长 {total} 不一致")
    layers, offset = [], 0
    for name, (m, n) in fingerprint:
        layers.append((name, vector[offset:offset + m * n].reshape(m, n)))
        offset += m * n
    return ParamSet(tuple(layers))


def trim_top_density(vectors: np.ndarray, density: float) -> np.ndarray:
    """每个来源只保留绝对值最大的 density 比例坐标，其余置零。"""
    n = vectors.shape[1]
    if n == 0:
        return vectors.copy()
    keep = int(math.ceil(density * n))
    magnitudes = np.abs(vectors)
    # 第 keep 大的绝对值作为阈值，与阈值相等的坐标全部保留
    kth = np.partition(magnitudes, n - keep, axis=1)[:, n - keep]
    return np.where(magnitudes >= kth[:, None], vectors, 0.0)


def elect_signs(trimmed: np.ndarray) -> np.ndarray:
    """逐坐标选出总幅值更大的符号；平票坐标取整体多数符号。"""
    signs = np.sign(trimmed.sum(axis=0))
    majority = np.sign(signs.sum())
    signs[signs == 0] = majority
    return signs


def disjoint_mean(trimmed: np.ndarray, signs: np.ndarray) -> np.ndarray:
    """只对与选举符号一致的非零项取平均。"""
    agree = ((signs[None, :] > 0) & (trimmed > 0)) | ((signs[None, :] < 0) & (trimmed < 0))
    counts = agree.sum(axis=0)
    totals = np.where(agree, trimmed, 0.0).sum(axis=0)
    return totals / np.maximum(counts, 1)


def merge_ties(
    base: ParamSet,
    tvs: Sequence[TaskVector],
    density: float = 1.0,
    scale: float = 1.0,
) -> ParamSet:
    """
    TIES-Merging：裁剪 -> 符号选举 -> 不相交平均，再按 scale 加回基座。

    Args:
        base: 基座参数
        tvs: 任务向量列表
        density: 每个来源保留的坐标比例，取值 (0, 1]
        scale: 合并结果的缩放系数

    Returns:
        合并后的参数集
    """
    if not 0.0 < density <= 1.0:
        raise StructuralError(f"density 必须在 (0, 1] 内，实际为 {density}")
    if not tvs:
        raise StructuralError("TIES-Merging 至少需要一个任务向量")
    _check_compatible(base, tvs)

    vectors = np.stack([flatten_delta(materialize_dense(tv)) for tv in tvs])
    trimmed = trim_top_density(vectors, density)
    signs = elect_signs(trimmed)
    merged = disjoint_mean(trimmed, signs)
    logger.debug(f"TIES: {len(tvs)} 个来源, 保留比例 {density}, 非零坐标 {np.count_nonzero(merged)}")

    delta = unflatten_delta(scale * merged, base.fingerprint)
    return ParamSet(tuple((name, m + delta[name]) for name, m in base.layers))


def _fingerprint_payload(fingerprint: Fingerprint) -> List[dict]:
    return [{"name": name, "shape": [m, n]} for name, (m, n) in fingerprint]


def _fingerprint_from_payload(payload: Iterable[dict]) -> Fingerprint:
    return tuple((item["name"], (int(item["shape"][0]), int(item["shape"][1]))) for item in payload)


def _matrix_payload(matrix: np.ndarray) -> dict:
    return {"shape": list(matrix.shape), "data": matrix.ravel().tolist()}


def _matrix_from_payload(payload: dict) -> np.ndarray:
    shape = tuple(int(s) for s in payload["shape"])
    return np.array(payload["data"], dtype=np.float64).reshape(shape)


def param_set_to_dict(params: ParamSet) -> dict:
    return {
        "fingerprint": _fingerprint_payload(params.fingerprint),
        "layers": [
            {"name": name, **_matrix_payload(matrix)} for name, matrix in params.layers
        ],
    }


def param_set_from_dict(payload: dict) -> ParamSet:
    params = ParamSet(
        tuple((item["name"], _matrix_from_payload(item)) for item in payload["layers"])
    )
    if params.fingerprint != _fingerprint_from_payload(payload["fingerprint"]):
        raise StructuralError("参数文件中的结构签名与层数据不一致")
    return params


def task_vector_to_dict(tv: TaskVector) -> dict:
    return {
        "fingerprint": _fingerprint_payload(tv.baseline_fingerprint),
        "rank": tv.rank,
        "updates": [
            {
                "name": u.name,
                "shape": list(u.shape),
                "B": _matrix_payload(u.B),
                "A": _matrix_payload(u.A),
            }
            for u in tv.updates
        ],
    }


def task_vector_from_dict(payload: dict) -> TaskVector:
    updates = tuple(
        LowRankUpdate(item["name"], _matrix_from_payload(item["B"]), _matrix_from_payload(item["A"]))
        for item in payload["updates"]
    )
    return TaskVector(updates, _fingerprint_from_payload(payload["fingerprint"]))


def save_param_set(params: ParamSet, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(param_set_to_dict(params)), encoding="utf-8")
    return path


def load_param_set(path: PathLike) -> ParamSet:
    with open(path, encoding="utf-8") as f:
        return param_set_from_dict(json.load(f))


def save_task_vector(tv: TaskVector, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(task_vector_to_dict(tv)), encoding="utf-8")
    return path


def load_task_vector(path: PathLike) -> TaskVector:
    with open(path, encoding="utf-8") as f:
        return task_vector_from_dict(json.load(f))
