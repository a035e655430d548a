#!/usr/bin/env python3
"""环境检查脚本 - 检查依赖包、环境变量与输出目录"""

import os
import sys
import tempfile
from pathlib import Path
from typing import List, Optional, Tuple

from .env_helper import ENV_OUT, ENV_SEED, ENV_WORKERS, REQUIRED_PACKAGES, find_and_load_env

# 颜色输出
GREEN = "\033[92m"
RED = "\033[91m"
YELLOW = "\033[93m"
BLUE = "\033[94m"
RESET = "\033[0m"


def check_python_version() -> bool:
    """检查 Python 版本"""
    version = sys.version_info
    print(f"\n{BLUE}[1/4] 检查 Python 版本{RESET}")

    if version >= (3, 10):
        print(f"  {GREEN}✓{RESET} Python {version.major}.{version.minor}.{version.micro}")
        return True
    else:
        print(f"  {RED}✗{RESET} Python 版本过低: {version.major}.{version.minor}.{version.micro}")
        print(f"  {YELLOW}需要 Python 3.10+{RESET}")
        return False


def check_dependencies() -> Tuple[bool, List[str]]:
    """检查依赖包"""
    print(f"\n{BLUE}[2/4] 检查依赖包{RESET}")

    missing = []
    for module, (package, desc) in REQUIRED_PACKAGES.items():
        try:
            __import__(module)
            print(f"  {GREEN}✓{RESET} {package} ({desc})")
        except ImportError:
            print(f"  {RED}✗{RESET} {package} ({desc}) - 未安装")
            missing.append(package)

    return len(missing) == 0, missing


def check_env_vars() -> bool:
    """显示可选的环境变量，它们都有默认值"""
    print(f"\n{BLUE}[3/4] 检查环境变量{RESET}")

    optional = {
        ENV_OUT: "输出目录",
        ENV_SEED: "数据与训练种子",
        ENV_WORKERS: "源域训练线程数",
    }
    ok = True
    for var, desc in optional.items():
        value = os.getenv(var)
        if not value:
            print(f"  {YELLOW}○{RESET} {var} - 未设置，使用配置默认值 ({desc})")
            continue
        if var != ENV_OUT and not value.strip().lstrip("-").isdigit():
            print(f"  {RED}✗{RESET} {var} = {value} 不是整数 ({desc})")
            ok = False
        else:
            print(f"  {GREEN}✓{RESET} {var} = {value} ({desc})")
    return ok


def check_output_dir(out_dir: Path) -> bool:
    """检查输出目录可写"""
    print(f"\n{BLUE}[4/4] 检查输出目录{RESET}")

    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(dir=out_dir):
            pass
    except OSError as e:
        print(f"  {RED}✗{RESET} {out_dir} 不可写: {e}")
        return False
    print(f"  {GREEN}✓{RESET} {out_dir} 可写")
    return True


def check_env(out_dir: Optional[str] = None) -> bool:
    """执行全部检查并打印结果，返回是否全部通过"""
    env_file = find_and_load_env()
    target = Path(out_dir or os.getenv(ENV_OUT) or "output")

    print(f"\n{BLUE}{'='*60}{RESET}")
    print(f"{BLUE}模型合并自适应 - 环境检查{RESET}")
    print(f"{BLUE}{'='*60}{RESET}")
    if env_file:
        print(f"  已加载 {env_file}")

    results = []
    results.append(("Python 版本", check_python_version()))
    deps_ok, missing_deps = check_dependencies()
    results.append(("依赖包", deps_ok))
    results.append(("环境变量", check_env_vars()))
    results.append(("输出目录", check_output_dir(target)))

    # 总结
    print(f"\n{BLUE}{'='*60}{RESET}")
    print(f"{BLUE}检查结果{RESET}")
    print(f"{BLUE}{'='*60}{RESET}\n")

    all_passed = all(passed for _, passed in results)
    for name, passed in results:
        status = f"{GREEN}✓{RESET}" if passed else f"{RED}✗{RESET}"
        print(f"  {status} {name}")

    if missing_deps:
        print(f"\n{YELLOW}安装缺失的依赖包:{RESET}")
        print(f"  uv pip install {' '.join(missing_deps)}")

    print()
    if all_passed:
        print(f"{GREEN}✓ 所有检查通过！环境配置正确。{RESET}\n")
    else:
        print(f"{RED}✗ 部分检查未通过，请根据上述建议修复。{RESET}\n")
    return all_passed


def main(out_dir: Optional[str] = None) -> int:
    """主函数"""
    return 0 if check_env(out_dir) else 1


if __name__ == "__main__":
    sys.exit(main())
