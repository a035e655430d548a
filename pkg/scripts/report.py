# Copyright (c) 2025
# 模型合并自适应 - 结果汇总

"""把 metrics.csv 汇总为 方法 × 目标域 的 QWK 表，每列最优值加方括号标出。"""

import json
import logging
from pathlib import Path
from typing import Dict, Union

import pandas as pd

from .env_helper import METHODS
from .errors import ReportError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

REQUIRED_COLUMNS = ("target_id", "method", "seed", "qwk")
AVERAGE_COLUMN = "avg"


def load_metrics(csv_path: PathLike) -> pd.DataFrame:
    csv_path = Path(csv_path)
    if not csv_path.exists():
        raise ReportError(f"指标文件不存在: {csv_path}")
    try:
        df = pd.read_csv(csv_path)
    except pd.errors.EmptyDataError as e:
        raise ReportError(f"指标文件为空: {csv_path}") from e
    except pd.errors.ParserError as e:
        raise ReportError(f"指标文件格式错误: {csv_path}: {e}") from e

    missing = [c for c in REQUIRED_COLUMNS if c not in df.columns]
    if missing:
        raise ReportError(f"指标文件缺少列 {missing}: {csv_path}")
    if df.empty:
        raise ReportError(f"指标文件没有数据行: {csv_path}")

    qwk = pd.to_numeric(df["qwk"], errors="coerce")
    if qwk.isna().any():
        raise ReportError(f"qwk 列含非数值: {csv_path}")
    df = df.assign(qwk=qwk, target_id=df["target_id"].astype(str), method=df["method"].astype(str))
    return df


def _method_order(methods) -> list:
    known = [m for m in METHODS if m in set(methods)]
    return known + sorted(set(methods) - set(known))


def summarize(df: pd.DataFrame) -> pd.DataFrame:
    """按种子取平均，行是方法，列是目标域，最后一列为跨目标域平均。"""
    table = df.pivot_table(index="method", columns="target_id", values="qwk", aggfunc="mean")
    table = table.reindex(_method_order(table.index))
    table[AVERAGE_COLUMN] = table.mean(axis=1)
    table.columns.name = None
    return table


def best_per_column(table: pd.DataFrame) -> Dict[str, str]:
    # idxmax 在平票时取表中靠前的方法
    return {str(col): str(table[col].idxmax()) for col in table.columns if table[col].notna().any()}


def format_table(table: pd.DataFrame, best: Dict[str, str]) -> str:
    def cell(method: str, col: str) -> str:
        value = table.at[method, col]
        if pd.isna(value):
            return "-"
        text = f"{value:.3f}"
        return f"[{text}]" if best.get(str(col)) == method else f" {text} "

    formatted = pd.DataFrame(
        {col: [cell(m, col) for m in table.index] for col in table.columns},
        index=table.index,
    )
    return formatted.to_string()


def run_report(csv_path: PathLike, out_dir: PathLike) -> dict:
    """
    读取 metrics.csv，写出 report.txt 与 report.json

    Args:
        csv_path: 评估阶段写出的指标文件
        out_dir: 报告输出目录

    Returns:
        报告字典 {"targets", "methods", "table", "std", "best", "n_seeds"}
    """
    df = load_metrics(csv_path)
    table = summarize(df)
    best = best_per_column(table)
    spread = df.pivot_table(index="method", columns="target_id", values="qwk", aggfunc="std")

    payload = {
        "targets": [str(c) for c in table.columns if c != AVERAGE_COLUMN],
        "methods": [str(m) for m in table.index],
        "table": {
            str(m): {str(c): (None if pd.isna(v) else float(v)) for c, v in row.items()}
            for m, row in table.iterrows()
        },
        "std": {
            str(m): {str(c): (None if pd.isna(v) else float(v)) for c, v in row.items()}
            for m, row in spread.iterrows()
        },
        "best": best,
        "n_seeds": int(df["seed"].nunique()),
    }

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    text = format_table(table, best)
    (out_dir / "report.txt").write_text(text + "\n", encoding="utf-8")
    (out_dir / "report.json").write_text(json.dumps(payload, ensure_ascii=False, indent=2), encoding="utf-8")

    logger.info(f"报告已写入 {out_dir / 'report.txt'}\n{text}")
    return payload
