"""环境与实验配置辅助函数"""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from dotenv import load_dotenv

from .errors import ConfigError

ENV_OUT = "MERGE_ADAPT_OUT"
ENV_SEED = "MERGE_ADAPT_SEED"
ENV_WORKERS = "MERGE_ADAPT_WORKERS"

# 默认的源域分数区间，按源域编号循环使用
RANGE_CYCLE = ([0, 4], [0, 3], [1, 6])

# 模块名 -> (包名, 用途)
REQUIRED_PACKAGES = {
    "numpy": ("numpy", "数组运算"),
    "scipy": ("scipy", "特殊函数、Cholesky、Sobol 序列"),
    "pandas": ("pandas", "指标 CSV 与报告"),
    "dotenv": ("python-dotenv", ".env 加载"),
}

METHODS = (
    "pim",
    "pim_uniform_prior",
    "pim_no_entropy",
    "pim_no_kl",
    "random_search",
    "averaging",
    "task_arithmetic",
    "ties",
    "base",
    "joint_train",
)

# 决定单个 adapt/{method}_seed{seed}.json 内容的自适应参数
ADAPTATION_FIELDS = (
    "n_init", "n_iter", "xi", "n_candidates", "n_restarts",
    "eval_batch_size", "ta_scale", "ties_density", "ties_scale",
)

# 只影响自适应及之后阶段的字段，不进入配置摘要
UNHASHED_FIELDS = frozenset({"out_dir", "workers", "seeds", "methods", *ADAPTATION_FIELDS})


def find_and_load_env() -> Optional[Path]:
    """查找并加载 .env 文件，已存在的环境变量不会被覆盖"""
    env_paths = [
        Path.cwd() / ".env",
        Path(__file__).parent.parent / ".env",
    ]

    for env_path in env_paths:
        if env_path.exists():
            load_dotenv(env_path, override=False)
            return env_path

    return None


def check_dependencies() -> Tuple[bool, List[str]]:
    """
    检查依赖包

    Returns:
        (是否全部安装, 缺失的包列表)
    """
    missing = []
    for module, (package, _) in REQUIRED_PACKAGES.items():
        try:
            __import__(module)
        except ImportError:
            missing.append(package)

    return len(missing) == 0, missing


def quick_env_check() -> Dict[str, Any]:
    """
    快速环境检查（不输出详细信息）

    Returns:
        检查结果字典
    """
    env_file = find_and_load_env()
    deps_ok, missing_deps = check_dependencies()

    return {
        "env_file": env_file,
        "deps_ok": deps_ok,
        "missing_deps": missing_deps,
        "ready": deps_ok,
    }


@dataclass
class ExperimentConfig:
    """合成多域实验的全部配置，对应一个 JSON 文档。"""

    # 域
    n_sources: int = 5
    dim: int = 16
    n_samples: int = 400
    target_samples: Optional[int] = None
    source_ranges: Optional[List[List[int]]] = None
    target_range: List[int] = field(default_factory=lambda: [0, 4])

    # 域偏移
    mean_shift: float = 0.5
    offset_noise: float = 0.5
    concept_perturbation: float = 0.3
    label_noise: float = 0.3
    n_adversarial: int = 1
    adversarial_shift: float = 8.0
    target_sources: List[int] = field(default_factory=lambda: [0, 3])
    target_novelty: float = 0.3

    # 源域训练
    rank: int = 4
    lora_alpha: Optional[float] = None
    learning_rate: float = 0.1
    max_steps: int = 2000
    tol: float = 1e-9
    base_scale: float = 0.01

    # 自适应
    n_init: int = 10
    n_iter: int = 30
    xi: float = 0.01
    n_candidates: int = 4096
    n_restarts: int = 8
    eval_batch_size: int = 64
    ta_scale: float = 0.4
    ties_density: float = 1.0
    ties_scale: float = 1.0
    methods: List[str] = field(default_factory=lambda: list(METHODS))

    # 运行
    seed: int = 0
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    workers: int = 1
    out_dir: str = "output"

    def __post_init__(self):
        if self.source_ranges is None:
            self.source_ranges = [list(RANGE_CYCLE[j % len(RANGE_CYCLE)]) for j in range(self.n_sources)]
        self.validate()

    def validate(self) -> None:
        if self.n_sources < 1:
            raise ConfigError(f"n_sources 必须 ≥ 1，实际为 {self.n_sources}")
        if not 0 <= self.n_adversarial < self.n_sources:
            raise ConfigError(f"n_adversarial 必须在 [0, {self.n_sources}) 内")
        if len(self.source_ranges) != self.n_sources:
            raise ConfigError(f"source_ranges 长度 {len(self.source_ranges)} ≠ n_sources")
        for r in list(self.source_ranges) + [self.target_range]:
            if len(r) != 2 or r[1] - r[0] + 1 < 2:
                raise ConfigError(f"分数区间非法: {r}")
        adversarial = set(self.adversarial_sources)
        if not self.target_sources:
            raise ConfigError("target_sources 不能为空")
        for j in self.target_sources:
            if not 0 <= j < self.n_sources or j in adversarial:
                raise ConfigError(f"target_sources 中的 {j} 不是合法的非对抗源域")
        for name in ("offset_noise", "concept_perturbation", "label_noise", "target_novelty", "adversarial_shift"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} 不能为负")
        if self.dim < 1 or self.n_samples < 2:
            raise ConfigError("dim 必须 ≥ 1，n_samples 必须 ≥ 2")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"未知方法: {unknown}，可选 {list(METHODS)}")
        if not self.seeds:
            raise ConfigError("seeds 不能为空")

    @property
    def adversarial_sources(self) -> List[int]:
        return list(range(self.n_sources - self.n_adversarial, self.n_sources))

    @property
    def n_classes_max(self) -> int:
        return max(b - a + 1 for a, b in list(self.source_ranges) + [self.target_range])

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def config_hash(self) -> str:
        """决定数据与源域训练产物的字段摘要。"""
        payload = {k: v for k, v in self.to_dict().items() if k not in UNHASHED_FIELDS}
        text = json.dumps(payload, sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def adaptation_hash(self) -> str:
        """决定单个自适应结果的参数摘要，不含种子与方法列表。"""
        payload = {k: getattr(self, k) for k in ADAPTATION_FIELDS}
        text = json.dumps(payload, sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def load_config(
    config_path: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> ExperimentConfig:
    """
    读取配置：命令行 > 环境变量 > 配置文件 > 默认值

    Args:
        config_path: JSON 配置文件路径
        overrides: 命令行覆盖项，值为 None 的项忽略

    Returns:
        ExperimentConfig
    """
    find_and_load_env()

    values: Dict[str, Any] = {}
    if config_path:
        with open(config_path, encoding="utf-8") as f:
            try:
                values.update(json.load(f))
            except json.JSONDecodeError as e:
                raise ConfigError(f"配置文件不是合法的 JSON: {config_path}: {e}") from e

    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"配置文件包含未知字段: {unknown}")

    if os.getenv(ENV_OUT):
        values["out_dir"] = os.environ[ENV_OUT]
    for env_name, key in ((ENV_SEED, "seed"), (ENV_WORKERS, "workers")):
        if os.getenv(env_name):
            try:
                values[key] = int(os.environ[env_name])
            except ValueError as e:
                raise ConfigError(f"{env_name} 必须是整数: {os.environ[env_name]!r}") from e

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in known:
            raise ConfigError(f"未知的覆盖字段: {key}")
        values[key] = value

    return ExperimentConfig(**values)
