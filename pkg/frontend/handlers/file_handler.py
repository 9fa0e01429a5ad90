# file operations handler (config, manifest, logs, plots, datasets)

import csv
import json
import logging
import math
import os
import platform
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import scipy

from backend import get_version
from backend.errors import ConfigError, IoFailure, RoleMissing
from backend.sim_search import load_neighbors
from backend.tensor_io import Domain, Tensor, ensure_parent, load_tensor, save_tensor
from backend.training import DatasetHandle

logger = logging.getLogger(__name__)

CLEAN_SUFFIX = '.clean.n2st'
PAIR_SUFFIX = '.pair.n2st'
NEIGHBORS_SUFFIX = '.n2sn'
IMAGE_SUFFIXES = ('.n2st', '.pgm')


def manifest_path(output: str) -> str:
    return f"{output}.manifest.json"


class FileHandler:
    """handles file operations (config, manifest, logs, plots, datasets)"""

    def load_config(self, filename: str) -> Dict[str, str]:
        """read a flat `key = value` file; keys use underscores"""
        try:
            with open(filename, 'r', encoding='utf-8') as f:
                lines = f.readlines()
        except OSError as e:
            raise IoFailure(f"cannot read config {filename}: {e}") from e

        values = {}
        for number, raw in enumerate(lines, start=1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ConfigError(f"{filename}:{number}: expected 'key = value', got '{line}'")
            key, value = (part.strip() for part in line.split('=', 1))
            if not key:
                raise ConfigError(f"{filename}:{number}: empty key")
            key = key.lstrip('-').replace('-', '_')
            if key in values:
                raise ConfigError(f"{filename}:{number}: duplicate key '{key}'")
            values[key] = value

        logger.info(f"Loaded {len(values)} settings from {filename}")
        return values

    def write_manifest(self, cmd, status: str, error: Optional[str] = None,
                       outputs: Sequence[str] = ()) -> Optional[str]:
        """json record of the run beside its primary output"""
        output = cmd.primary_output
        if not output:
            return None
        record = cmd.to_dict()
        record.update({
            'status': status,
            'error': error,
            'outputs': list(outputs),
            'versions': {
                'denoiser': get_version(),
                'numpy': np.__version__,
                'scipy': scipy.__version__,
                'python': platform.python_version(),
            },
        })
        path = manifest_path(output)
        try:
            ensure_parent(path)
            with open(path, 'w', encoding='utf-8') as f:
                json.dump(record, f, indent=2, sort_keys=True)
                f.write('\n')
        except OSError as e:
            logger.error(f"Failed to write manifest {path}: {e}")
            return None
        logger.info(f"Manifest written to {path}")
        return path

    def save_rows_csv(self, header: Sequence[str], rows: Iterable[Sequence], filename: str) -> None:
        try:
            ensure_parent(filename)
            with open(filename, 'w', newline='', encoding='utf-8') as f:
                writer = csv.writer(f, lineterminator='\n')
                writer.writerow(header)
                for row in rows:
                    writer.writerow(row)
        except OSError as e:
            raise IoFailure(f"cannot write {filename}: {e}") from e
        logger.info(f"Saved CSV to {filename}")

    def save_history_csv(self, history: List[dict], filename: str) -> None:
        """training log: step, lr, loss, skipped"""
        rows = ([h['step'], repr(h['lr']), repr(h['loss']), h['skipped']] for h in history)
        self.save_rows_csv(('step', 'lr', 'loss', 'skipped'), rows, filename)

    def export_loss_plot(self, history: List[dict], filename: str, title: str = "") -> None:
        """loss and learning-rate curves to PNG"""
        from matplotlib.figure import Figure
        from matplotlib.backends.backend_agg import FigureCanvasAgg

        steps = np.array([h['step'] for h in history])
        loss = np.array([h['loss'] for h in history], dtype=np.float64)
        lr = np.array([h['lr'] for h in history], dtype=np.float64)
        valid = np.isfinite(loss)

        fig = Figure(figsize=(12, 5), dpi=100)
        if title:
            fig.suptitle(title, fontsize=14)

        # subplot 1: loss, raw and smoothed
        ax1 = fig.add_subplot(1, 2, 1)
        ax1.plot(steps[valid], loss[valid], color='0.7', linewidth=1, label='loss')
        window = max(1, min(50, int(valid.sum()) // 10))
        if valid.sum() >= window > 1:
            kernel = np.ones(window) / window
            smooth = np.convolve(loss[valid], kernel, mode='valid')
            ax1.plot(steps[valid][window - 1:], smooth, 'r-', linewidth=2,
                     label=f'mean of {window}')
        ax1.set_xlabel('Step')
        ax1.set_ylabel('Loss')
        ax1.set_title('Training Loss')
        if valid.any() and np.all(loss[valid] > 0):
            ax1.set_yscale('log')
        ax1.legend()
        ax1.grid(True, alpha=0.3)

        # subplot 2: schedule
        ax2 = fig.add_subplot(1, 2, 2)
        ax2.plot(steps, lr, 'b-', linewidth=2)
        ax2.set_xlabel('Step')
        ax2.set_ylabel('Learning rate')
        ax2.set_title('Cosine Schedule')
        ax2.grid(True, alpha=0.3)

        fig.tight_layout()
        try:
            ensure_parent(filename)
            FigureCanvasAgg(fig).print_png(filename)
        except OSError as e:
            raise IoFailure(f"cannot write {filename}: {e}") from e
        logger.info(f"Loss plot exported to {filename}")

    def read_tensor(self, filename: str) -> Tensor:
        return load_tensor(filename)

    def write_tensor(self, tensor: Tensor, filename: str) -> None:
        try:
            ensure_parent(filename)
        except OSError as e:
            raise IoFailure(f"cannot create folder for {filename}: {e}") from e
        save_tensor(tensor, filename)
        logger.info(f"Wrote {tensor} to {filename}")

    def discover_dataset(self, data_dir: str) -> Tuple[DatasetHandle, Domain]:
        """files grouped by stem: noisy, <stem>.clean.n2st, <stem>.pair.n2st, <stem>.n2sn"""
        try:
            names = sorted(os.listdir(data_dir))
        except OSError as e:
            raise IoFailure(f"cannot list {data_dir}: {e}") from e

        noisy, clean, paired, neighbors = {}, {}, {}, {}
        for name in names:
            path = os.path.join(data_dir, name)
            if not os.path.isfile(path):
                continue
            if name.endswith(CLEAN_SUFFIX):
                clean[name[:-len(CLEAN_SUFFIX)]] = path
            elif name.endswith(PAIR_SUFFIX):
                paired[name[:-len(PAIR_SUFFIX)]] = path
            elif name.endswith(NEIGHBORS_SUFFIX):
                neighbors[name[:-len(NEIGHBORS_SUFFIX)]] = path
            elif name.endswith(IMAGE_SUFFIXES):
                noisy[os.path.splitext(name)[0]] = path

        if not noisy:
            raise RoleMissing(f"no noisy images in {data_dir}")
        stems = sorted(noisy)

        def role(table: dict, label: str, loader):
            if not table:
                return None
            missing = [s for s in stems if s not in table]
            if missing:
                raise RoleMissing(f"{label} missing for: {', '.join(missing)}")
            return [loader(table[s]) for s in stems]

        tensors = [load_tensor(noisy[s]) for s in stems]
        data = DatasetHandle(
            noisy=[t.data for t in tensors],
            clean=role(clean, "clean images", lambda p: load_tensor(p).data),
            paired=role(paired, "paired images", lambda p: load_tensor(p).data),
            neighbors=role(neighbors, "neighbor files", load_neighbors),
        )
        domains = {t.domain for t in tensors}
        domain = Domain.HOUNSFIELD if Domain.HOUNSFIELD in domains else tensors[0].domain
        logger.info(f"Dataset {data_dir}: {len(stems)} inputs, "
                    f"clean={data.clean is not None}, paired={data.paired is not None}, "
                    f"neighbors={data.neighbors is not None}")
        return data, domain


def format_float(value: float) -> str:
    """csv text for a metric; inf stays 'inf'"""
    if math.isinf(value):
        return 'inf' if value > 0 else '-inf'
    return f"{value:.6f}"
