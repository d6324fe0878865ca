__all__ = ['ConfigSection', 'RunConfig']

import json
from dataclasses import asdict, fields
from pathlib import Path

from . import ERROR, ConfigError, logger
from .codec import CodecConfig
from .eval.probe import ProbeConfig
from .matm import LoraConfig, MatmConfig, TrainConfig
from .synthdata import CorpusConfig


class ConfigSection(dict):
    """A dict whose set of keys is fixed when it is built"""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.__dict__ = self

    def __setattr__(self, key, value):
        if key not in [*self.keys(), '__dict__']:
            ERROR(f"'{key}' is not a configuration key", ConfigError)
        super().__setattr__(key, value)

    def __setitem__(self, key, value):
        if key not in self:
            ERROR(f"'{key}' is not a configuration key", ConfigError)
        super().__setitem__(key, value)

    def update(self, *args, **kwargs):
        new = dict(*args, **kwargs)
        invalid = set(new).difference(self.keys())
        if invalid:
            ERROR(f"unknown configuration keys: {sorted(invalid)}", ConfigError)
        for k, v in new.items():
            if isinstance(self[k], ConfigSection):
                if not isinstance(v, dict):
                    ERROR(f"'{k}' is a section, got {v!r}", ConfigError)
                self[k].update(v)
            else:
                self[k] = v


def _section(obj) -> ConfigSection:
    d = asdict(obj) if not isinstance(obj, dict) else dict(obj)
    d.pop('seed', None)  # every seed derives from the top-level one
    return ConfigSection(d)


class RunConfig(ConfigSection):
    """Resolved settings of one command-line run.

    Precedence: defaults < --config file < --set pairs < dedicated flags.
    """

    def __init__(self):
        super().__init__(
            seed=0,
            threads=1,
            out_dir='out',
            paths=_section(
                {
                    'corpus': None,
                    'domain_corpus': None,
                    'codec': None,
                    'matm': None,
                    'domain_adapter': None,
                    'species_adapter': None,
                }
            ),
            corpus=_section(CorpusConfig()),
            codec=_section(CodecConfig()),
            matm=_section(MatmConfig()),
            train=_section(TrainConfig()),
            lora=_section(LoraConfig()),
            finetune=_section({'iterations': 500, 'lr': 1e-4, 'batch_size': 6}),
            prompt=_section(
                {
                    'source': 'Codas',
                    'temperature': 1.0,
                    'periodic_prompt': None,
                    'onset_mask_width': None,
                    'steps': None,
                    'typical_mass': None,
                    'sample_cutoff': None,
                }
            ),
            translate=_section({'context': None}),
            fad=_section(
                {'unbiased': True, 'embedding': 'random', 'reference': None}
            ),
            probe=_section(
                {**asdict(ProbeConfig()), 'task': 'rhythm', 'variant': 'full', 'layer': None}
            ),
            recon=_section({'chunk_ms': [2.27, 22.7]}),
            denoise=_section(
                {'guard': 0.03, 'floor': 0.02, 'window_len': 512, 'hop': 256}
            ),
            onsets=_section(
                {'frame': 512, 'hop': 128, 'threshold': 3.0, 'median_frames': 31}
            ),
        )

    def __repr__(self):
        return f"<RunConfig at {hex(id(self))}, seed {self['seed']}>"

    def load(self, fpath) -> 'RunConfig':
        try:
            with open(fpath) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            ERROR(f"cannot read config '{fpath}': {e}", ConfigError)
        self.update(d)
        logger.debug(f"loaded config '{fpath}'")
        return self

    def set(self, dotted: str, value) -> 'RunConfig':
        """'section.key' = value, a string value is parsed as JSON if it can be"""
        if isinstance(value, str):
            try:
                value = json.loads(value)
            except json.JSONDecodeError:
                pass
        keys = dotted.split('.')
        node = self
        for k in keys[:-1]:
            if not isinstance(node.get(k), ConfigSection):
                ERROR(f"'{dotted}' does not name a configuration key", ConfigError)
            node = node[k]
        node[keys[-1]] = value
        return self

    def set_pair(self, pair: str) -> 'RunConfig':
        if '=' not in pair:
            ERROR(f"expected section.key=value, got '{pair}'", ConfigError)
        key, value = pair.split('=', 1)
        return self.set(key.strip(), value.strip())

    def build(self, cls, section: str, **extra):
        """dataclass from a section, seeded from the top-level seed"""
        kwargs = dict(self[section])
        names = {f.name for f in fields(cls)}
        if 'seed' in names:
            kwargs['seed'] = self['seed']
        kwargs.update(extra)
        kwargs = {k: v for k, v in kwargs.items() if k in names}
        for f in fields(cls):
            if f.type in (tuple, 'tuple') and isinstance(kwargs.get(f.name), list):
                kwargs[f.name] = tuple(kwargs[f.name])
        try:
            obj = cls(**kwargs)
        except TypeError as e:
            ERROR(f"bad '{section}' settings: {e}", ConfigError)
        if hasattr(obj, 'validate'):
            obj.validate()
        return obj

    def to_dict(self) -> dict:
        return json.loads(json.dumps(self))

    def save(self, fpath) -> Path:
        fpath = Path(fpath)
        fpath.parent.mkdir(parents=True, exist_ok=True)
        with open(fpath, 'w') as fh:
            json.dump(self, fh, indent=2, sort_keys=True)
        return fpath
