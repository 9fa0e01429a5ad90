# subcommand execution handler

import logging
import sys
from typing import Callable, Dict, List, TextIO

from backend.baselines_metrics import HU_PEAK, UNIT_PEAK, NlmParams, nlm_denoise, psnr, ssim
from backend.errors import ConfigError, UsageError
from backend.experiments import (
    equivalence_curve, mask_ablation, median_vs_mean, texture_benchmark
)
from backend.neural_denoiser import load_model, save_model
from backend.noise_sim import NoiseKind, NoiseSpec
from backend.phantoms import hu_volume, texture
from backend.sim_search import knn_similar_pixels, save_neighbors
from backend.tensor_io import VOLUME_LABELS, Domain, Tensor
from backend.training import (
    TrainConfig, TrainMode, Trainer, denoise, estimate_zcd, iterative_refine
)
from backend.volume_pairing import dissimilar_mask, distance_map
from frontend.handlers.file_handler import FileHandler, format_float
from frontend.models.command import Command
from frontend.utils.limits import DenoiseLimits

logger = logging.getLogger(__name__)

HU_VALUE_SCALE = 1000.0


class CommandHandler:
    """runs one parsed command; returns the paths it wrote"""

    def __init__(self, files: FileHandler = None, out: TextIO = None):
        self.files = files or FileHandler()
        self.out = out or sys.stdout
        self._commands: Dict[str, Callable[[Command], List[str]]] = {
            'simulate': self.simulate,
            'search': self.search,
            'mask': self.mask,
            'train': self.train,
            'refine': self.refine,
            'denoise': self.denoise,
            'eval': self.evaluate,
            'estimate-zcd': self.estimate_zcd,
            'nlm': self.nlm,
            'texture': self.texture,
            'phantom': self.phantom,
            'experiment': self.experiment,
        }

    def execute(self, cmd: Command) -> List[str]:
        if cmd.name not in self._commands:
            raise UsageError(f"unknown command '{cmd.name}'")
        logger.info(f"Running '{cmd.name}'")
        outputs = self._commands[cmd.name](cmd)
        logger.info(f"'{cmd.name}' finished, wrote {len(outputs)} file(s)")
        return outputs

    def _print(self, line: str) -> None:
        self.out.write(line + '\n')

    # --- data preparation ---

    def simulate(self, cmd: Command) -> List[str]:
        src = self.files.read_tensor(cmd.get('input'))
        kind = NoiseKind(cmd.get('kind', 'gaussian'))
        spec = NoiseSpec(kind, std=cmd.get('std', 0.0),
                         lam=cmd.get('lam', DenoiseLimits.LAMBDA_DEFAULT), seed=cmd.seed)
        noisy = spec.apply(src)
        self.files.write_tensor(src.with_data(noisy), cmd.get('output'))
        return [cmd.get('output')]

    def search(self, cmd: Command) -> List[str]:
        src = self.files.read_tensor(cmd.get('input'))
        neighbors = knn_similar_pixels(src, k=cmd.get('k'), s=cmd.get('s'),
                                       window=cmd.get('window'), workers=cmd.get('threads', 1))
        save_neighbors(neighbors, cmd.get('output'))
        return [cmd.get('output')]

    def mask(self, cmd: Command) -> List[str]:
        a = self.files.read_tensor(cmd.get('slice_i'))
        b = self.files.read_tensor(cmd.get('slice_j'))
        d = distance_map(a, b, cmd.get('s'))
        m = dissimilar_mask(d, cmd.get('d_th'), cmd.get('s'))
        self._print(f"excluded,{m.excluded},{m.mask.size}")
        self.files.write_tensor(Tensor(m.mask, Domain.RAW), cmd.get('output'))
        return [cmd.get('output')]

    def texture(self, cmd: Command) -> List[str]:
        img = texture(cmd.get('kind'), cmd.get('size'), cmd.seed)
        self.files.write_tensor(Tensor(img, Domain.UNIT_INTERVAL), cmd.get('output'))
        return [cmd.get('output')]

    def phantom(self, cmd: Command) -> List[str]:
        vol, _ = hu_volume(cmd.get('slices'), cmd.get('size'), cmd.seed,
                           cmd.get('change'))
        self.files.write_tensor(Tensor(vol, Domain.HOUNSFIELD, VOLUME_LABELS), cmd.get('output'))
        return [cmd.get('output')]

    # --- training ---

    def _train_config(self, cmd: Command, domain: Domain) -> TrainConfig:
        threads = cmd.get('threads', 1)
        scale = cmd.get('value_scale')
        if scale is None:
            scale = HU_VALUE_SCALE if domain == Domain.HOUNSFIELD else 1.0
        return TrainConfig(
            mode=TrainMode(cmd.get('mode')),
            loss=cmd.get('loss'),
            k=cmd.options.get('k'),
            s=cmd.options.get('s'),
            d_th=cmd.options.get('d_th'),
            pairing=cmd.get('pairing'),
            search_window=cmd.options.get('window'),
            batch=cmd.get('batch'),
            crop=cmd.options.get('crop'),
            steps=cmd.get('steps'),
            lr0=cmd.get('lr'),
            seed=cmd.seed,
            augment=cmd.get('augment'),
            use_mask=cmd.get('mask'),
            arch=cmd.get('arch'),
            width1=cmd.get('width1'),
            width2=cmd.get('width2'),
            relu=cmd.get('relu'),
            residual=cmd.get('residual'),
            value_scale=scale,
            workers=threads if threads > 1 else 0,
            log_every=cmd.get('log_every'),
        )

    def _save_training(self, cmd: Command, trainer: Trainer, model) -> List[str]:
        out = cmd.get('output')
        save_model(model, out, trainer.opt)
        written = [out]
        log_csv = cmd.get('log_csv', f"{out}.csv")
        self.files.save_history_csv(trainer.history, log_csv)
        written.append(log_csv)
        if cmd.get('plot'):
            self.files.export_loss_plot(trainer.history, cmd.get('plot'),
                                        title=f"{trainer.config.mode.value} ({trainer.config.loss.value})")
            written.append(cmd.get('plot'))
        return written

    def train(self, cmd: Command) -> List[str]:
        data, domain = self.files.discover_dataset(cmd.get('data_dir'))
        config = self._train_config(cmd, domain)
        trainer = Trainer(config, progress=sys.stderr.isatty())
        model = trainer.fit(data)
        return self._save_training(cmd, trainer, model)

    def refine(self, cmd: Command) -> List[str]:
        model, _ = load_model(cmd.get('model'))
        data, domain = self.files.discover_dataset(cmd.get('data_dir'))
        config = self._train_config(cmd, domain)
        if config.mode != TrainMode.NOISE2SIM:
            raise ConfigError("refine works on noise2sim 2D training only")
        model = iterative_refine(model, data, cmd.get('rounds'), config,
                                 progress=sys.stderr.isatty())
        save_model(model, cmd.get('output'))
        return [cmd.get('output')]

    # --- inference and evaluation ---

    def denoise(self, cmd: Command) -> List[str]:
        model, _ = load_model(cmd.get('model'))
        src = self.files.read_tensor(cmd.get('input'))
        volume = True if cmd.get('volume') else None
        out = denoise(model, src.data, tile=cmd.options.get('tile'), volume=volume)
        self.files.write_tensor(src.with_data(out), cmd.get('output'))
        return [cmd.get('output')]

    def nlm(self, cmd: Command) -> List[str]:
        src = self.files.read_tensor(cmd.get('input'))
        params = NlmParams(cmd.get('h'), cmd.get('patch'), cmd.get('radius'))
        out = nlm_denoise(src, params)
        self.files.write_tensor(src.with_data(out), cmd.get('output'))
        return [cmd.get('output')]

    def evaluate(self, cmd: Command) -> List[str]:
        a = self.files.read_tensor(cmd.get('a'))
        b = self.files.read_tensor(cmd.get('b'))
        peak = cmd.options.get('peak')
        if peak is None:
            hu = Domain.HOUNSFIELD in (a.domain, b.domain)
            peak = HU_PEAK if hu else UNIT_PEAK

        rows = []
        for metric in cmd.get('metric'):
            if metric == 'psnr':
                value = psnr(a, b, peak)
            elif metric == 'ssim':
                value = ssim(a, b, peak)
            else:
                raise UsageError(f"unknown metric '{metric}'")
            rows.append((metric, format_float(value), format_float(peak)))

        self._print("metric,value,peak")
        for row in rows:
            self._print(",".join(row))
        if cmd.get('output'):
            self.files.save_rows_csv(("metric", "value", "peak"), rows, cmd.get('output'))
            return [cmd.get('output')]
        return []

    def estimate_zcd(self, cmd: Command) -> List[str]:
        data, domain = self.files.discover_dataset(cmd.get('data_dir'))
        mean, lo, hi = estimate_zcd(data, cmd.get('m'), cmd.seed)
        self._print("min,max")
        self._print(f"{format_float(lo)},{format_float(hi)}")
        if cmd.get('output'):
            self.files.write_tensor(Tensor(mean, domain), cmd.get('output'))
            return [cmd.get('output')]
        return []

    def experiment(self, cmd: Command) -> List[str]:
        name = cmd.get('name')
        seed = cmd.seed
        steps = cmd.options.get('steps')
        if name == 'equivalence':
            curve = equivalence_curve(seed=seed, steps=steps)
            rows = [(f"gap_{n}", format_float(g)) for n, g in curve]
        elif name == 'ablation':
            result = mask_ablation(seed, **({'steps': steps} if steps else {}))
            rows = [(k, format_float(v)) for k, v in result.items()]
        elif name == 'median':
            result = median_vs_mean(seed, **({'steps': steps} if steps else {}))
            rows = [(k, format_float(v)) for k, v in result.items()]
        elif name == 'textures':
            result = texture_benchmark(seed, **({'steps': steps} if steps else {}))
            rows = [(k, format_float(v)) for k, v in result.items()]
        else:
            raise UsageError(f"unknown experiment '{name}'")

        self._print("key,value")
        for key, value in rows:
            self._print(f"{key},{value}")
        if cmd.get('output'):
            self.files.save_rows_csv(("key", "value"), rows, cmd.get('output'))
            return [cmd.get('output')]
        return []

