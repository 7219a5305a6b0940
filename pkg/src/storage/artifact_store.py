"""
实验产物存储 - 对抗图像、补丁、迭代轨迹、报告与图表
"""
import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from PIL import Image  # noqa: E402

from src.core.types import ImageBuffer, PatchSet  # noqa: E402

logger = logging.getLogger(__name__)

Rows = Union[pd.DataFrame, Sequence[Dict]]


def _json_default(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if hasattr(value, 'value'):
        return value.value
    raise TypeError(f"无法序列化: {type(value).__name__}")


class ArtifactStore:
    """
    产物目录管理器

    目录结构：
        images/   对抗图像（.npy 精确浮点 + .png 预览）
        patches/  补丁 JSON
        traces/   迭代轨迹 JSON-lines
        reports/  报告 JSON / CSV
        plots/    静态图表
    """

    def __init__(self, root: str = "./outputs"):
        self.root = Path(root)
        for sub in ('images', 'patches', 'traces', 'reports', 'plots'):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        logger.debug(f"ArtifactStore 初始化完成: {self.root}")

    def path(self, sub: str, name: str) -> Path:
        return self.root / sub / name

    def save_image(self, name: str, img: ImageBuffer) -> Path:
        """无损保存：.npy 保留全部精度，.png 为 8 位预览"""
        npy = self.path('images', f"{name}.npy")
        np.save(npy, img.pixels)
        Image.fromarray(img.to_uint8()).save(self.path('images', f"{name}.png"))
        return npy

    def load_image(self, name: str) -> ImageBuffer:
        return ImageBuffer(np.load(self.path('images', f"{name}.npy")))

    def save_patches(self, name: str, patches: PatchSet) -> Path:
        out = self.path('patches', f"{name}.json")
        with open(out, 'w', encoding='utf-8') as f:
            json.dump(patches.to_json_list(), f, indent=2)
        return out

    def load_patches(self, name: str) -> PatchSet:
        with open(self.path('patches', f"{name}.json"), 'r', encoding='utf-8') as f:
            return PatchSet.from_json_list(json.load(f))

    def save_trace(self, name: str, records: Sequence[Dict]) -> Path:
        out = self.path('traces', f"{name}.jsonl")
        with open(out, 'w', encoding='utf-8') as f:
            for record in records:
                f.write(json.dumps(record, default=_json_default, ensure_ascii=False) + "\n")
        return out

    def load_trace(self, name: str) -> List[Dict]:
        with open(self.path('traces', f"{name}.jsonl"), 'r', encoding='utf-8') as f:
            return [json.loads(line) for line in f if line.strip()]

    def save_attack(self, name: str, result) -> Dict[str, str]:
        """保存一次攻击的对抗图像、补丁与轨迹"""
        paths = {
            'image': str(self.save_image(name, result.adversarial_image)),
            'patches': str(self.save_patches(name, result.patches)),
            'trace': str(self.save_trace(name, [r.to_dict() for r in result.trace])),
        }
        logger.debug(f"攻击产物已保存: {name}")
        return paths

    def save_report(self, name: str, report: Dict, rows: Optional[Rows] = None) -> Path:
        """报告 JSON；若给出表格行，同时写出同名 CSV"""
        out = self.path('reports', f"{name}.json")
        with open(out, 'w', encoding='utf-8') as f:
            json.dump(report, f, indent=2, default=_json_default, ensure_ascii=False)
        if rows is not None:
            self.save_table(name, rows)
        logger.info(f"✅ 报告已保存: {out}")
        return out

    def save_table(self, name: str, rows: Rows) -> Path:
        frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows))
        out = self.path('reports', f"{name}.csv")
        frame.to_csv(out, index=isinstance(rows, pd.DataFrame) and frame.index.name is not None)
        return out

    def load_table(self, name: str) -> pd.DataFrame:
        return pd.read_csv(self.path('reports', f"{name}.csv"))

    def plot_distance_curve(self, rows: Sequence[Dict], name: str = "distance_sweep") -> Path:
        """mAP - 归一化距离曲线"""
        frame = pd.DataFrame(list(rows))
        fig, ax = plt.subplots(figsize=(5, 3.5))
        if not frame.empty:
            ax.plot(frame['distance'], frame['mAP'], marker='o')
        ax.set_xlabel('normalized patch-object distance')
        ax.set_ylabel('mAP')
        ax.set_xlim(-0.02, 1.02)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        out = self.path('plots', f"{name}.png")
        fig.savefig(out, dpi=120)
        plt.close(fig)
        return out

    def plot_group_bars(self, rows: Sequence[Dict], name: str = "scale_groups") -> Path:
        """分组的干净 / 攻击后 mAP 柱状图"""
        frame = pd.DataFrame(list(rows))
        fig, ax = plt.subplots(figsize=(5, 3.5))
        if not frame.empty:
            x = np.arange(len(frame))
            ax.bar(x - 0.2, frame['clean_mAP'], width=0.4, label='clean')
            ax.bar(x + 0.2, frame['attacked_mAP'], width=0.4, label='attacked')
            ax.set_xticks(x)
            ax.set_xticklabels(frame['group'])
            ax.legend()
        ax.set_ylabel('mAP')
        fig.tight_layout()
        out = self.path('plots', f"{name}.png")
        fig.savefig(out, dpi=120)
        plt.close(fig)
        return out


def finite_or_none(value: float) -> Optional[float]:
    """JSON 报告中把 inf / nan 记为 null"""
    if value is None or not math.isfinite(value):
        return None
    return float(value)
