"""
批量执行 - 逐图像任务的线程池，单项失败记录后继续
"""
from concurrent.futures import ThreadPoolExecutor
import logging
from typing import Callable, List, Optional, Sequence, Tuple, TypeVar

from tqdm import tqdm

logger = logging.getLogger(__name__)

T = TypeVar('T')
R = TypeVar('R')


def run_batch(
    fn: Callable[[T], R],
    items: Sequence[T],
    workers: int = 1,
    desc: str = "批量处理",
    names: Optional[Sequence[str]] = None,
) -> Tuple[List[Optional[R]], List[str]]:
    """
    对每个元素执行 fn

    Args:
        fn: 单项任务（检测器的前向与梯度只读，可在线程间共享）
        items: 任务列表
        workers: 线程数；1 时顺序执行
        desc: 进度条描述
        names: 每项的名称，用于错误信息

    Returns:
        (与 items 对齐的结果，失败项为 None；错误信息列表)
    """
    names = list(names) if names is not None else [str(i) for i in range(len(items))]
    results: List[Optional[R]] = [None] * len(items)
    errors: List[str] = []

    def guarded(idx: int):
        try:
            return idx, fn(items[idx]), None
        except Exception as e:  # 单张图像失败不影响整批
            return idx, None, f"{names[idx]}: {type(e).__name__}: {e}"

    show = logger.isEnabledFor(logging.INFO)
    if workers <= 1:
        outcomes = (guarded(i) for i in range(len(items)))
        for idx, value, err in tqdm(outcomes, total=len(items), desc=desc, disable=not show):
            results[idx] = value
            if err:
                errors.append(err)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = pool.map(guarded, range(len(items)))
            for idx, value, err in tqdm(outcomes, total=len(items), desc=desc, disable=not show):
                results[idx] = value
                if err:
                    errors.append(err)

    for err in errors:
        logger.error(f"❌ {err}")
    logger.info(f"✅ {desc}完成: {len(items) - len(errors)}/{len(items)} 成功")
    return results, errors
