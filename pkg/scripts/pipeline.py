# Copyright (c) 2025
# 模型合并自适应 - 完整流程脚本

"""完整的实验流程：生成数据 -> 源域训练 -> 先验统计 -> 无源自适应 -> 评估 -> 报告

自适应阶段只读取基座参数、任务向量、源域统计量与无标签的目标域特征，
源域样本与目标域标签对它不可见。
"""

import argparse
import json
import logging
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .bayes_opt import BoConfig, BoTrace, optimize, random_search
from .env_helper import METHODS, ExperimentConfig, load_config
from .errors import ConfigError, MergeAdaptError, MissingArtifactError
from .metrics import qwk_from_scores, scores_from_distributions
from .param_algebra import (
    MergeSpec,
    ParamSet,
    TaskVector,
    load_param_set,
    load_task_vector,
    merge,
    merge_average,
    merge_task_arithmetic,
    merge_ties,
    save_param_set,
    save_task_vector,
)
from .pim_objective import ObjectiveConfig, ObjectiveValue, ObjectiveVariant, evaluate
from .report import run_report
from .score_prior import (
    DiscretePrior,
    SourceStatistics,
    build_prior,
    compute_source_statistics,
    load_statistics,
    save_statistics,
)
from .scoring_model import (
    LabeledSet,
    ProbScorer,
    TrainConfig,
    batch_predict,
    init_base_params,
    load_labeled_set,
    load_target_labels,
    save_labeled_set,
    save_target_labels,
    train_joint,
    train_source,
)
from .synthetic import gen_domains

logger = logging.getLogger(__name__)

# 通过贝叶斯优化 / 随机搜索求 λ 的方法及其目标函数变体
SEARCH_METHODS = {
    "pim": ObjectiveVariant.PIM,
    "pim_uniform_prior": ObjectiveVariant.MI_UNIFORM,
    "pim_no_entropy": ObjectiveVariant.PIM_NO_ENTROPY,
    "pim_no_kl": ObjectiveVariant.PIM_NO_KL,
    "random_search": ObjectiveVariant.PIM,
}

MANIFEST_NAME = "manifest.json"
METRICS_NAME = "metrics.csv"
SUBSET_SWEEP_NAME = "subset_sweep.csv"


def _now() -> str:
    return datetime.now().isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """各阶段产物（相对 out_dir 的路径）、执行状态与配置摘要。"""

    out_dir: Path
    config_hash: str
    outputs: Dict[str, Any] = field(default_factory=dict)
    steps: Dict[str, dict] = field(default_factory=dict)

    @property
    def path(self) -> Path:
        return self.out_dir / MANIFEST_NAME

    def resolve(self, key: str) -> Union[Path, List[Path]]:
        if key not in self.outputs:
            raise MissingArtifactError(f"清单中没有 {key}，请先运行对应阶段")
        value = self.outputs[key]
        if isinstance(value, list):
            return [self.out_dir / v for v in value]
        return self.out_dir / value

    def relative(self, path: Path) -> str:
        return path.relative_to(self.out_dir).as_posix()

    def record_step(self, name: str, success: bool, error: Optional[str] = None) -> None:
        entry = {"success": success, "timestamp": _now()}
        if error:
            entry["error"] = error
        self.steps[name] = entry
        self.save()

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash, "outputs": self.outputs, "steps": self.steps}

    def save(self) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.to_dict(), ensure_ascii=False, indent=2), encoding="utf-8")
        return self.path

    @classmethod
    def load(cls, out_dir: Path) -> "RunManifest":
        with open(out_dir / MANIFEST_NAME, encoding="utf-8") as f:
            payload = json.load(f)
        return cls(out_dir, payload["config_hash"], payload.get("outputs", {}), payload.get("steps", {}))


@dataclass(frozen=True, eq=False)
class AdaptationInputs:
    """自适应阶段能看到的全部输入。"""

    base: ParamSet
    task_vectors: List[TaskVector]
    statistics: List[SourceStatistics]
    target: LabeledSet
    joint: Optional[TaskVector] = None


class ExperimentPipeline:
    """实验处理器 - 完整流程。"""

    def __init__(self, cfg: ExperimentConfig, out_dir: Optional[Union[str, Path]] = None):
        self.cfg = cfg
        self.out_dir = Path(out_dir or cfg.out_dir)
        self.manifest = self._open_manifest()

    def _open_manifest(self) -> RunManifest:
        config_hash = self.cfg.config_hash()
        if (self.out_dir / MANIFEST_NAME).exists():
            manifest = RunManifest.load(self.out_dir)
            if manifest.config_hash != config_hash:
                logger.warning(f"{self.out_dir} 中的清单来自不同的配置，将从头开始")
                shutil.rmtree(self.out_dir / "adapt", ignore_errors=True)
                return RunManifest(self.out_dir, config_hash)
            return manifest
        return RunManifest(self.out_dir, config_hash)

    def _step(self, name: str, fn: Callable[..., Any], *args) -> Any:
        try:
            result = fn(*args)
        except Exception as e:
            logger.error(f"✗ {name} 失败: {e}")
            self.manifest.record_step(name, False, str(e))
            raise
        self.manifest.record_step(name, True)
        return result

    # ---------- 数据 ----------

    def gen_data(self) -> RunManifest:
        """生成源域与目标域，目标域特征与标签分两个文件存放。"""
        logger.info("[步骤 1/5] 生成合成数据")
        return self._step("gen_data", self._gen_data)

    def _gen_data(self) -> RunManifest:
        sources, target = gen_domains(self.cfg)
        data_dir = self.out_dir / "data"
        source_paths = [save_labeled_set(s, data_dir / f"{s.domain}.jsonl") for s in sources]
        features_path = save_labeled_set(target, data_dir / "target_features.jsonl", with_scores=False)
        labels_path = save_target_labels(target, data_dir / "target_labels.json")

        m = self.manifest
        m.outputs["source_data"] = [m.relative(p) for p in source_paths]
        m.outputs["target_features"] = m.relative(features_path)
        m.outputs["target_labels"] = m.relative(labels_path)
        logger.info(f"✓ 数据已写入 {data_dir}")
        return m

    def _load_sources(self) -> List[LabeledSet]:
        return [load_labeled_set(p) for p in self.manifest.resolve("source_data")]

    # ---------- 源域阶段 ----------

    def run_pretrain(self) -> RunManifest:
        """每个源域训练一个任务向量并计算统计量，完成后清单不再引用源域数据。"""
        logger.info("[步骤 2/5] 源域训练")
        return self._step("pretrain", self._pretrain)

    def _train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            rank=self.cfg.rank,
            lora_alpha=self.cfg.lora_alpha,
            learning_rate=self.cfg.learning_rate,
            max_steps=self.cfg.max_steps,
            tol=self.cfg.tol,
            seed=seed,
        )

    def _pretrain(self) -> RunManifest:
        cfg, m = self.cfg, self.manifest
        sources = self._load_sources()
        base = init_base_params(cfg.n_classes_max, cfg.dim, seed=cfg.seed, scale=cfg.base_scale)
        base_path = save_param_set(base, self.out_dir / "base_params.json")

        def train(job):
            j, data = job
            return train_source(base, data, self._train_config(cfg.seed + j))

        with ThreadPoolExecutor(max_workers=max(1, cfg.workers)) as executor:
            task_vectors = list(executor.map(train, enumerate(sources)))

        tv_dir = self.out_dir / "task_vectors"
        tv_paths = [save_task_vector(tv, tv_dir / f"{s.domain}.json") for s, tv in zip(sources, task_vectors)]
        logger.info(f"✓ 已训练 {len(tv_paths)} 个源域任务向量")

        joint = train_joint(base, sources, self._train_config(cfg.seed))
        joint_path = save_task_vector(joint, tv_dir / "joint.json")
        logger.info("✓ 已训练联合训练参照模型")

        m.outputs["base_params"] = m.relative(base_path)
        m.outputs["task_vectors"] = [m.relative(p) for p in tv_paths]
        m.outputs["joint_task_vector"] = m.relative(joint_path)
        self._fit_priors(sources)
        m.outputs.pop("source_data", None)
        return m

    def fit_priors(self) -> RunManifest:
        """只计算源域统计量（train-sources 已包含这一步）。"""
        logger.info("[步骤 2/5] 计算源域统计量")
        return self._step("fit_priors", self._refit_priors)

    def _refit_priors(self) -> RunManifest:
        m = self.manifest
        if "source_data" not in m.outputs and "statistics" in m.outputs:
            logger.info(f"源域数据已在 train-sources 后释放，沿用已有的 {len(m.outputs['statistics'])} 个统计量")
            return m
        if "source_data" not in m.outputs:
            raise MissingArtifactError("清单中没有 source_data，请先运行 gen-data")
        return self._fit_priors(self._load_sources())

    def _fit_priors(self, sources: Sequence[LabeledSet]) -> RunManifest:
        m = self.manifest
        stats_dir = self.out_dir / "stats"
        paths = []
        for s in sources:
            stats = compute_source_statistics(s.domain, s.scores, s.range)
            paths.append(save_statistics(stats, stats_dir / f"{s.domain}.json"))
            logger.debug(f"{s.domain}: Beta({stats.params.alpha:.4g}, {stats.params.beta:.4g}), n={stats.n}")
        m.outputs["statistics"] = [m.relative(p) for p in paths]
        logger.info(f"✓ 已写入 {len(paths)} 个源域统计量")
        return m

    # ---------- 无源自适应 ----------

    def load_adaptation_inputs(self) -> AdaptationInputs:
        m = self.manifest
        joint = None
        if "joint_task_vector" in m.outputs:
            joint = load_task_vector(m.resolve("joint_task_vector"))
        return AdaptationInputs(
            base=load_param_set(m.resolve("base_params")),
            task_vectors=[load_task_vector(p) for p in m.resolve("task_vectors")],
            statistics=[load_statistics(p) for p in m.resolve("statistics")],
            target=load_labeled_set(m.resolve("target_features")),
            joint=joint,
        )

    def evaluation_batch(self, target: LabeledSet, seed: int) -> np.ndarray:
        """固定的评估批次：按种子无放回抽取，样本不足时使用全部样本。"""
        n, size = len(target), self.cfg.eval_batch_size
        if n <= size:
            logger.warning(f"目标域只有 {n} 个样本，不超过 eval_batch_size={size}，全部用于目标函数")
            return target.features
        rng = np.random.default_rng(seed)
        return target.features[rng.choice(n, size=size, replace=False)]

    def build_objective(
        self, inputs: AdaptationInputs, variant: ObjectiveVariant, seed: int
    ) -> Callable[[np.ndarray], ObjectiveValue]:
        """f(λ) = 目标函数(合并后评分器在固定批次上的预测分布)。"""
        batch = self.evaluation_batch(inputs.target, seed)
        n_classes = inputs.target.range.n_classes
        prior: Optional[DiscretePrior] = None
        if variant != ObjectiveVariant.MI_UNIFORM:
            prior = build_prior(inputs.statistics, inputs.target.range)
        objective_cfg = ObjectiveConfig(variant, prior)

        def f(coefficients: np.ndarray) -> ObjectiveValue:
            spec = MergeSpec(tuple(coefficients))
            scorer = ProbScorer.merged(inputs.base, inputs.task_vectors, spec, n_classes)
            return evaluate(batch_predict(scorer, batch), objective_cfg)

        return f

    def _bo_config(self, seed: int) -> BoConfig:
        cfg = self.cfg
        return BoConfig.for_dimension(
            cfg.n_sources,
            n_init=cfg.n_init,
            n_iter=cfg.n_iter,
            xi=cfg.xi,
            seed=seed,
            n_candidates=cfg.n_candidates,
            n_restarts=cfg.n_restarts,
        )

    def adapt_path(self, method: str, seed: int) -> Path:
        return self.out_dir / "adapt" / f"{method}_seed{seed}.json"

    def run_adapt(self, method: str, seed: int) -> Union[BoTrace, MergeSpec, dict]:
        """
        对目标域求合并方式并写出结果文件

        Args:
            method: METHODS 中的方法名
            seed: 评估批次与搜索的随机种子

        Returns:
            搜索类方法返回 BoTrace，线性基线返回 MergeSpec，TIES 返回其参数
        """
        if method not in METHODS:
            raise ConfigError(f"未知方法: {method}，可选 {list(METHODS)}")
        logger.info(f"[步骤 3/5] 自适应: {method} (seed={seed})")
        return self._step(f"adapt/{method}/seed{seed}", self._adapt, method, seed)

    def _adapt(self, method: str, seed: int) -> Union[BoTrace, MergeSpec, dict]:
        cfg, m = self.cfg, self.manifest
        inputs = self.load_adaptation_inputs()
        n = len(inputs.task_vectors)
        path = self.adapt_path(method, seed)
        payload: Dict[str, Any] = {"method": method, "seed": seed}

        if method in SEARCH_METHODS:
            f = self.build_objective(inputs, SEARCH_METHODS[method], seed)
            search = random_search if method == "random_search" else optimize
            result = search(f, self._bo_config(seed))
            result.method = method
            payload.update(result.to_dict())
            payload["merge_spec"] = MergeSpec(tuple(result.lambda_star)).to_dict()
            lam = ", ".join(f"{v:.3f}" for v in result.lambda_star)
            logger.info(f"✓ {method}: f*={result.best_value:.6f}, λ*=[{lam}]")
        elif method == "ties":
            result = {"density": cfg.ties_density, "scale": cfg.ties_scale}
            payload["ties"] = result
        else:
            if method == "averaging":
                result = MergeSpec.uniform(n, 1.0 / n)
            elif method == "task_arithmetic":
                result = MergeSpec.uniform(n, cfg.ta_scale, bounds=(min(0.0, cfg.ta_scale), max(1.0, cfg.ta_scale)))
            elif method == "joint_train":
                if inputs.joint is None:
                    raise MissingArtifactError("清单中没有联合训练任务向量")
                result = MergeSpec((1.0,))
            else:
                result = MergeSpec.uniform(n, 0.0)
            payload["merge_spec"] = result.to_dict()

        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, ensure_ascii=False, indent=2), encoding="utf-8")
        m.outputs.setdefault("adapt", {})[f"{method}/seed{seed}"] = {
            "path": m.relative(path),
            "adaptation_hash": cfg.adaptation_hash(),
        }
        return result

    # ---------- 评估 ----------

    def has_current_adapt(self, method: str, seed: int) -> bool:
        """清单中有该结果、参数摘要与当前配置一致且文件存在时才可复用。"""
        entry = self.manifest.outputs.get("adapt", {}).get(f"{method}/seed{seed}")
        if not isinstance(entry, dict) or entry.get("adaptation_hash") != self.cfg.adaptation_hash():
            return False
        return (self.out_dir / entry["path"]).exists()

    def merged_params(self, inputs: AdaptationInputs, method: str, payload: dict) -> ParamSet:
        """由自适应结果文件重建合并后的参数。"""
        if method == "ties":
            return merge_ties(inputs.base, inputs.task_vectors, payload["ties"]["density"], payload["ties"]["scale"])
        if method == "averaging":
            return merge_average(inputs.base, inputs.task_vectors)
        if method == "task_arithmetic":
            scale = MergeSpec.from_dict(payload["merge_spec"]).coefficients[0]
            return merge_task_arithmetic(inputs.base, inputs.task_vectors, scale)
        spec = MergeSpec.from_dict(payload["merge_spec"])
        if method == "joint_train":
            return merge(inputs.base, [inputs.joint], spec)
        return merge(inputs.base, inputs.task_vectors, spec)

    def target_qwk(self, inputs: AdaptationInputs, params: ParamSet, labels: np.ndarray) -> float:
        score_range = inputs.target.range
        scorer = ProbScorer(params, score_range.n_classes)
        predicted = scores_from_distributions(batch_predict(scorer, inputs.target.features), score_range)
        return qwk_from_scores(labels, predicted, score_range)

    def run_evaluate(
        self, methods: Optional[Sequence[str]] = None, seeds: Optional[Sequence[int]] = None
    ) -> Path:
        """在完整目标域上评估每个 方法 × 种子，缺少或参数已变化的自适应结果会先补跑。"""
        logger.info("[步骤 4/5] 评估")
        return self._step("evaluate", self._evaluate, methods or self.cfg.methods, seeds or self.cfg.seeds)

    def _evaluate(self, methods: Sequence[str], seeds: Sequence[int]) -> Path:
        m = self.manifest
        inputs = self.load_adaptation_inputs()
        labels = load_target_labels(m.resolve("target_labels"))

        rows = []
        for method in methods:
            for seed in seeds:
                path = self.adapt_path(method, seed)
                if not self.has_current_adapt(method, seed):
                    if path.exists():
                        logger.warning(f"{m.relative(path)} 不是按当前自适应参数生成的，重新运行")
                    self.run_adapt(method, seed)
                with open(path, encoding="utf-8") as f:
                    payload = json.load(f)
                params = self.merged_params(inputs, method, payload)
                value = self.target_qwk(inputs, params, labels)
                rows.append({"target_id": inputs.target.domain, "method": method, "seed": seed, "qwk": value})
                logger.info(f"  {method:<18} seed={seed}: QWK={value:.4f}")

        csv_path = self.out_dir / METRICS_NAME
        pd.DataFrame(rows, columns=["target_id", "method", "seed", "qwk"]).to_csv(csv_path, index=False)
        m.outputs["metrics"] = m.relative(csv_path)
        logger.info(f"✓ {len(rows)} 行指标已写入 {csv_path}")
        return csv_path

    # ---------- 报告 ----------

    def run_report(self, csv_path: Optional[Union[str, Path]] = None) -> dict:
        logger.info("[步骤 5/5] 生成报告")
        source = Path(csv_path) if csv_path else self.manifest.resolve("metrics")
        return self._step("report", run_report, source, self.out_dir)

    def run_subset_sweep(self) -> Path:
        """
        枚举全部 2^M - 1 个非空源域子集，子集内平均合并后在目标域上计算 QWK。

        这一步使用目标域标签，只用于分析，不参与自适应。
        """
        logger.info("子集扫描")
        return self._step("subset_sweep", self._subset_sweep)

    def _subset_sweep(self) -> Path:
        m = self.manifest
        inputs = self.load_adaptation_inputs()
        labels = load_target_labels(m.resolve("target_labels"))
        n = len(inputs.task_vectors)

        rows = []
        for mask in range(1, 2 ** n):
            members = [j for j in range(n) if mask >> j & 1]
            coefficients = tuple(1.0 / len(members) if j in members else 0.0 for j in range(n))
            params = merge(inputs.base, inputs.task_vectors, MergeSpec(coefficients))
            rows.append({
                "subset": "".join("1" if j in members else "0" for j in range(n)),
                "size": len(members),
                "qwk": self.target_qwk(inputs, params, labels),
            })

        df = pd.DataFrame(rows, columns=["subset", "size", "qwk"])
        csv_path = self.out_dir / SUBSET_SWEEP_NAME
        df.to_csv(csv_path, index=False)
        m.outputs["subset_sweep"] = m.relative(csv_path)

        best = df.loc[df["qwk"].idxmax()]
        everything = df.loc[df["size"] == n, "qwk"].iloc[0]
        logger.info(f"✓ 最优子集 {best['subset']}: QWK={best['qwk']:.4f}；全部源域: QWK={everything:.4f}")
        return csv_path

    # ---------- 完整流程 ----------

    def run_all(self) -> RunManifest:
        self.gen_data()
        self.run_pretrain()
        for method in self.cfg.methods:
            for seed in self.cfg.seeds:
                self.run_adapt(method, seed)
        self.run_evaluate()
        self.run_report()
        logger.info(f"✓ 完整流程结束，清单: {self.manifest.path}")
        return self.manifest


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="模型合并自适应 - 完整流程")
    parser.add_argument("--config", help="JSON 配置文件")
    parser.add_argument("--seed", type=int, help="数据与源域训练的随机种子")
    parser.add_argument("--out", "-o", help="输出目录")
    parser.add_argument("--workers", type=int, help="源域训练线程数")
    parser.add_argument("--verbose", "-v", action="store_true", help="输出调试日志")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", help="生成合成的源域与目标域")
    sub.add_parser("train-sources", help="源域训练（包含统计量计算）")
    sub.add_parser("fit-priors", help="只计算源域统计量（train-sources 之后沿用已有统计量）")

    adapt = sub.add_parser("adapt", help="无源自适应")
    adapt.add_argument("--method", required=True, choices=METHODS)
    adapt.add_argument("--seeds", type=int, nargs="+", help="自适应种子列表")
    adapt.add_argument("--n-init", type=int, help="随机探测点数")
    adapt.add_argument("--n-iter", type=int, help="贝叶斯优化迭代次数")
    adapt.add_argument("--xi", type=float, help="EI 的探索参数")

    evaluate_cmd = sub.add_parser("evaluate", help="在目标域上评估")
    evaluate_cmd.add_argument("--methods", nargs="+", choices=METHODS)
    evaluate_cmd.add_argument("--seeds", type=int, nargs="+")

    report = sub.add_parser("report", help="汇总 metrics.csv")
    report.add_argument("--csv", help="指标文件路径（默认取清单中的路径）")

    sub.add_parser("subset-sweep", help="枚举源域子集")
    sub.add_parser("check-env", help="环境检查")
    sub.add_parser("run-all", help="完整流程")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s: %(message)s",
    )

    if args.command == "check-env":
        from .check_env import main as check_main

        return check_main(args.out)

    overrides = {
        "seed": args.seed,
        "out_dir": args.out,
        "workers": args.workers,
        "seeds": getattr(args, "seeds", None),
        "methods": getattr(args, "methods", None),
        "n_init": getattr(args, "n_init", None),
        "n_iter": getattr(args, "n_iter", None),
        "xi": getattr(args, "xi", None),
    }

    try:
        cfg = load_config(args.config, overrides)
        pipeline = ExperimentPipeline(cfg)

        if args.command == "gen-data":
            pipeline.gen_data()
        elif args.command == "train-sources":
            pipeline.run_pretrain()
        elif args.command == "fit-priors":
            pipeline.fit_priors()
        elif args.command == "adapt":
            for seed in cfg.seeds:
                pipeline.run_adapt(args.method, seed)
        elif args.command == "evaluate":
            pipeline.run_evaluate()
        elif args.command == "report":
            print(json.dumps(pipeline.run_report(args.csv), ensure_ascii=False, indent=2))
        elif args.command == "subset-sweep":
            pipeline.run_subset_sweep()
        elif args.command == "run-all":
            pipeline.run_all()
    except MergeAdaptError as e:
        logger.error(f"✗ {args.command} 失败: {e}")
        return 1

    return 0


if __name__ == "__main__":
    sys.exit(main())
