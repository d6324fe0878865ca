__all__ = [
    'ClickParams',
    'CodaSpec',
    'BeepSpec',
    'ManifestEntry',
    'DatasetManifest',
    'ManifestFile',
    'CorpusConfig',
    'synth_click',
    'synth_coda',
    'synth_echolocation',
    'synth_beeps',
    'build_corpus',
]

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from scipy import signal

from . import ERROR, ConfigError, DataError, logger
from .audio import Waveform, load_wav, write_wav
from .base import ReadWrite
from .func import substream

tasks = ('detection', 'rhythm', 'unit', 'vowel')


@dataclass(frozen=True)
class ClickParams:
    """Multi-pulse click: equally spaced, geometrically decaying bursts."""

    num_pulses: int = 4
    ipi: float = 0.0035  # s
    decay: float = 0.6
    pulse_width: float = 0.002  # s
    lowpass_hz: Optional[float] = None

    def __post_init__(self):
        if self.num_pulses < 1:
            ERROR(f"num_pulses must be >= 1, got {self.num_pulses}")
        if not self.ipi > self.pulse_width:
            ERROR(
                f"ipi {self.ipi} s must exceed pulse_width"
                f" {self.pulse_width} s"
            )
        if not 0.0 < self.decay <= 1.0:
            ERROR(f"decay must be in (0, 1], got {self.decay}")


@dataclass(frozen=True)
class CodaSpec:
    icis: tuple  # s, one per gap between clicks
    click: ClickParams = ClickParams()
    label: str = ''


@dataclass(frozen=True)
class BeepSpec:
    n_clicks: int
    duration: float  # s
    seed: int = 0

    def __post_init__(self):
        if self.n_clicks < 0:
            ERROR(f"n_clicks must be >= 0, got {self.n_clicks}")
        if not self.duration > 0:
            ERROR(f"beep duration must be > 0, got {self.duration}")


# -----------------------------------------------


def synth_click(
    p: ClickParams, sr: int, rng: np.random.Generator = None
) -> Waveform:
    """Pulse k peaks at k*round(ipi*sr) samples with amplitude decay**k."""
    if sr * p.ipi < 2:
        ERROR(f"ipi {p.ipi} s is under 2 samples at {sr} Hz")
    if p.lowpass_hz is not None and not 0 < p.lowpass_hz < sr / 2:
        ERROR(f"lowpass {p.lowpass_hz} Hz outside (0, {sr / 2}) Hz")
    rng = np.random.default_rng(0) if rng is None else rng

    spacing = int(round(p.ipi * sr))
    width = max(1, int(round(p.pulse_width * sr)))
    env = np.exp(-5.0 * np.arange(width) / width)
    sos = None
    if p.lowpass_hz is not None:
        sos = signal.butter(4, p.lowpass_hz, 'low', fs=sr, output='sos')

    out = np.zeros((p.num_pulses - 1) * spacing + width)
    for k in range(p.num_pulses):
        burst = env * rng.uniform(-1.0, 1.0, width)
        burst[0] = 1.0
        if sos is not None:
            burst = signal.sosfiltfilt(sos, burst, padlen=min(15, width - 1))
            burst /= np.abs(burst).max()
        out[k * spacing : k * spacing + width] += burst * p.decay**k
    return Waveform(out, sr)


def synth_coda(
    c: CodaSpec, sr: int, rng: np.random.Generator = None
) -> tuple:
    """Clicks at cumulative round(ici*sr) offsets; returns (audio, onsets)."""
    rng = np.random.default_rng(0) if rng is None else rng
    icis = tuple(c.icis)
    if any(not ici > 0 for ici in icis):
        ERROR(f"inter-click intervals must be > 0, got {icis}")

    clicks = [synth_click(c.click, sr, rng) for _ in range(len(icis) + 1)]
    gaps = [int(round(ici * sr)) for ici in icis]
    onsets = np.concatenate([[0], np.cumsum(gaps)]).astype(int).tolist()
    n = onsets[-1] + len(clicks[-1])
    if n / sr >= 2.0:
        ERROR(f"coda '{c.label}' lasts {n / sr:.3f} s, codas must be < 2 s")
    if gaps and min(gaps) < len(clicks[0]):
        ERROR(f"clicks of coda '{c.label}' overlap, shortest ici too small")

    out = np.zeros(n)
    for o, click in zip(onsets, clicks):
        out[o : o + len(click)] += click.samples
    return Waveform(out, sr), onsets


def synth_echolocation(
    n: int,
    ici: float,
    p: ClickParams,
    sr: int,
    rng: np.random.Generator = None,
) -> Waveform:
    """n clicks at a constant inter-click interval."""
    if n < 1:
        ERROR(f"echolocation train needs n >= 1 clicks, got {n}")
    if not ici > 0:
        ERROR(f"echolocation ici must be > 0, got {ici}")
    rng = np.random.default_rng(0) if rng is None else rng

    spacing = int(round(ici * sr))
    clicks = [synth_click(p, sr, rng) for _ in range(n)]
    if n > 1 and spacing < len(clicks[0]):
        ERROR(f"echolocation ici {ici} s is shorter than one click")
    out = np.zeros((n - 1) * spacing + len(clicks[0]))
    for k, click in enumerate(clicks):
        out[k * spacing : k * spacing + len(click)] += click.samples
    return Waveform(out, sr)


def synth_beeps(b: BeepSpec, sr: int = 44100) -> Waveform:
    """Zero buffer with n_clicks unit samples at seeded random positions."""
    N = int(round(b.duration * sr))
    if b.n_clicks > N:
        ERROR(f"{b.n_clicks} beeps do not fit in {N} samples")
    out = np.zeros(N)
    rng = np.random.default_rng(b.seed)
    out[rng.choice(N, size=b.n_clicks, replace=False)] = 1.0
    return Waveform(out, sr)


# -----------------------------------------------


@dataclass
class ManifestEntry:
    path: str
    labels: dict
    split: str = 'train'


@dataclass
class DatasetManifest:
    """Audio paths with task labels and a train/test tag.

    Relative paths resolve against the directory of the manifest file.
    """

    entries: list
    sample_rate: int
    root: Path = field(default=Path('.'), compare=False)

    def __post_init__(self):
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            ERROR("manifest paths must be unique")
        declared = set(self.entries[0].labels) if self.entries else set()
        for e in self.entries:
            if set(e.labels) != declared:
                ERROR(f"entry '{e.path}' does not carry labels {declared}")
            if e.split not in ('train', 'test'):
                ERROR(f"entry '{e.path}' has unknown split '{e.split}'")

    def __len__(self):
        return len(self.entries)

    def __repr__(self):
        return (
            f"<DatasetManifest at {hex(id(self))}, {len(self)} entries"
            f" @ {self.sample_rate} Hz>"
        )

    def to_dict(self) -> dict:
        return {
            'sample_rate': self.sample_rate,
            'entries': [asdict(e) for e in self.entries],
        }

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {'path': e.path, 'split': e.split, **e.labels}
            for e in self.entries
        ]
        df = pd.DataFrame(rows)
        df.attrs.update(sample_rate=self.sample_rate, root=str(self.root))
        return df

    def resolve(self, path) -> Path:
        path = Path(path)
        return path if path.is_absolute() else self.root / path

    def select(self, split: str = None, task: str = None) -> list:
        """Entries of a split.

        For every task but detection, rows labelled 'none' (the negatives)
        are dropped.
        """
        if task is not None and task not in tasks:
            ERROR(f"unknown task '{task}', choose from {tasks}", ConfigError)
        out = []
        for e in self.entries:
            if split is not None and e.split != split:
                continue
            if task not in (None, 'detection') and e.labels[task] == 'none':
                continue
            out.append(e)
        return out

    def waveforms(self, entries=None) -> list:
        entries = self.entries if entries is None else entries
        return [load_wav(self.resolve(e.path)) for e in entries]

    def save(self, fpath) -> Path:
        fpath = Path(fpath)
        fpath.parent.mkdir(parents=True, exist_ok=True)
        with open(fpath, 'w') as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        return fpath

    @classmethod
    def load(cls, fpath) -> 'DatasetManifest':
        fpath = Path(fpath)
        try:
            with open(fpath) as fh:
                d = json.load(fh)
            entries = [ManifestEntry(**e) for e in d['entries']]
            sample_rate = int(d['sample_rate'])
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as e:
            ERROR(f"cannot read manifest '{fpath}': {e}", DataError)
        return cls(entries, sample_rate, root=fpath.parent)


class ManifestFile(ReadWrite):
    """corpus manifest JSON"""

    @classmethod
    def read(cls, fpath, **kwargs):
        return DatasetManifest.load(fpath)

    @classmethod
    def write(cls, fpath, data: DatasetManifest, **kwargs):
        return data.save(fpath)


# -----------------------------------------------


def _default_rhythms():
    return {
        '1+1+3': [0.35, 0.35, 0.15, 0.15],
        '5R1': [0.18, 0.18, 0.18, 0.18],
        '4R2': [0.3, 0.3, 0.3],
        '1+3': [0.45, 0.12, 0.12],
        '3R': [0.25, 0.25],
    }


def _default_units():
    return {
        'A': {'num_pulses': 4, 'ipi': 0.0032, 'decay': 0.6},
        'B': {'num_pulses': 3, 'ipi': 0.0039, 'decay': 0.8},
        'C': {'num_pulses': 5, 'ipi': 0.0030, 'decay': 0.45},
    }


def _default_vowels():
    return {'a': 2500.0, 'i': 6000.0}


@dataclass
class CorpusConfig:
    sample_rate: int = 16000
    clip_seconds: float = 2.0
    count_per_class: int = 40
    n_noise: int = 40
    echolocation_negatives: int = 0
    echolocation_ici: float = 0.4
    seed: int = 0
    noise_level: float = 0.02
    noise_color: str = 'white'
    ici_jitter: float = 0.03
    test_fraction: float = 0.2
    pulse_width: float = 0.002
    echolocation_decay: float = 0.15
    rhythms: dict = field(default_factory=_default_rhythms)
    units: dict = field(default_factory=_default_units)
    vowels: dict = field(default_factory=_default_vowels)

    def validate(self):
        for task, inventory in [
            ('rhythm', self.rhythms),
            ('unit', self.units),
            ('vowel', self.vowels),
        ]:
            if len(inventory) < 2:
                ERROR(
                    f"corpus needs >= 2 {task} classes, got"
                    f" {list(inventory)}",
                    ConfigError,
                )
        if self.count_per_class < 1:
            ERROR("corpus count_per_class must be >= 1", ConfigError)
        if self.noise_color not in ('white', 'pink'):
            ERROR(f"unknown noise color '{self.noise_color}'", ConfigError)
        if not 0.0 < self.test_fraction < 1.0:
            ERROR("corpus test_fraction must be in (0, 1)", ConfigError)


def _background(cfg: CorpusConfig, n: int, rng) -> np.ndarray:
    noise = rng.standard_normal(n)
    if cfg.noise_color == 'pink':
        # Kellet's economy pinking filter
        b = [0.049922035, -0.095993537, 0.050612699, -0.004408786]
        a = [1.0, -2.494956002, 2.017265875, -0.522189400]
        noise = signal.lfilter(b, a, noise)
        noise /= noise.std() or 1.0
    return cfg.noise_level * noise


def _render(cfg: CorpusConfig, job: dict) -> np.ndarray:
    sr = cfg.sample_rate
    n = int(round(cfg.clip_seconds * sr))
    rng = substream(cfg.seed, 'corpus', job['index'])

    clip = np.zeros(n)
    labels = job['labels']
    if labels['detection'] == 'coda':
        unit = dict(cfg.units[labels['unit']])
        unit.setdefault('pulse_width', cfg.pulse_width)
        click = ClickParams(
            **unit, lowpass_hz=float(cfg.vowels[labels['vowel']])
        )
        base = np.asarray(cfg.rhythms[labels['rhythm']], dtype=float)
        jitter = rng.uniform(-cfg.ici_jitter, cfg.ici_jitter, base.size)
        coda = CodaSpec(tuple(base * (1 + jitter)), click, labels['rhythm'])
        w, _ = synth_coda(coda, sr, rng)
    elif job.get('echolocation'):
        click = ClickParams(
            num_pulses=3, decay=cfg.echolocation_decay, ipi=0.0035
        )
        n_clicks = max(1, int(cfg.clip_seconds / cfg.echolocation_ici) - 1)
        w = synth_echolocation(n_clicks, cfg.echolocation_ici, click, sr, rng)
    else:
        w = None

    if w is not None:
        if len(w) > n:
            ERROR(f"event of {len(w)} samples exceeds the {n}-sample clip")
        start = int(rng.integers(0, n - len(w) + 1))
        clip[start : start + len(w)] = w.samples * rng.uniform(0.5, 0.8)
    clip += _background(cfg, n, rng)
    peak = np.abs(clip).max()
    if peak > 1.0:
        clip /= peak
    return clip


def build_corpus(
    cfg: CorpusConfig, out_dir, workers: int = 1
) -> DatasetManifest:
    """Write labelled WAV clips plus manifest.json under out_dir."""
    cfg.validate()
    out_dir = Path(out_dir)

    jobs = []
    for rhythm in cfg.rhythms:
        for _ in range(cfg.count_per_class):
            rng = substream(cfg.seed, 'labels', len(jobs))
            labels = {
                'detection': 'coda',
                'rhythm': rhythm,
                'unit': str(rng.choice(list(cfg.units))),
                'vowel': str(rng.choice(list(cfg.vowels))),
            }
            jobs.append({'labels': labels, 'group': f'coda/{rhythm}'})
    negatives = [False] * cfg.n_noise + [True] * cfg.echolocation_negatives
    for echolocation in negatives:
        labels = {t: 'none' for t in tasks}
        jobs.append(
            {
                'labels': labels,
                'group': 'none',
                'echolocation': echolocation,
            }
        )
    for i, job in enumerate(jobs):
        job['index'] = i
        job['path'] = f"audio/{i:05d}.wav"

    # stratified split, per rhythm class and for the negatives
    groups = pd.Series([job['group'] for job in jobs])
    split = np.empty(len(jobs), dtype=object)
    for g, idx in groups.groupby(groups).groups.items():
        idx = np.asarray(idx)
        substream(cfg.seed, f'split/{g}').shuffle(idx)
        n_train = int(round(len(idx) * (1 - cfg.test_fraction)))
        split[idx[:n_train]] = 'train'
        split[idx[n_train:]] = 'test'

    def write(job):
        clip = Waveform(_render(cfg, job), cfg.sample_rate)
        write_wav(out_dir / job['path'], clip, encoding='pcm16')

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        list(pool.map(write, jobs))

    entries = [
        ManifestEntry(job['path'], job['labels'], str(s))
        for job, s in zip(jobs, split)
    ]
    manifest = DatasetManifest(entries, cfg.sample_rate, root=out_dir)
    manifest.save(out_dir / 'manifest.json')
    logger.info(
        f"wrote {len(entries)} clips to '{out_dir}'"
        f" ({(split == 'train').sum()} train / {(split == 'test').sum()} test)"
    )
    return manifest
