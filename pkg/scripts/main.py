"""模型合并自适应 - 主入口脚本

先做快速环境检查，依赖齐全后再交给流程命令行
"""

import sys
from typing import Optional, Sequence

from .env_helper import quick_env_check


def check_and_setup_env() -> bool:
    """
    检查环境

    Returns:
        环境是否就绪
    """
    result = quick_env_check()

    if result["ready"]:
        return True

    # 如果缺少依赖包，提示安装
    print("请先安装依赖包:")
    print(f"  uv pip install {' '.join(result['missing_deps'])}")
    return False


def main(argv: Optional[Sequence[str]] = None) -> int:
    if not check_and_setup_env():
        return 1

    from .pipeline import main as pipeline_main

    return pipeline_main(argv)


if __name__ == "__main__":
    sys.exit(main())
