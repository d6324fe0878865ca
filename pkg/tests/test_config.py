import json

import pytest

from clicktok import ConfigError
from clicktok.codec import CodecConfig
from clicktok.config import ConfigSection, RunConfig
from clicktok.eval.probe import ProbeConfig
from clicktok.matm import MatmConfig


def test_section_keys_are_fixed():
    s = ConfigSection(a=1, b=ConfigSection(c=2))
    s.a = 3
    s['b']['c'] = 4
    assert s == {'a': 3, 'b': {'c': 4}}
    with pytest.raises(ConfigError):
        s.z = 1
    with pytest.raises(ConfigError):
        s['z'] = 1
    with pytest.raises(ConfigError, match='unknown configuration keys'):
        s.update(z=1)


def test_section_nested_update():
    s = ConfigSection(a=1, b=ConfigSection(c=2, d=3))
    s.update({'b': {'c': 5}})
    assert s.b == {'c': 5, 'd': 3}
    with pytest.raises(ConfigError, match='is a section'):
        s.update(b=1)


def test_defaults():
    cfg = RunConfig()
    assert cfg.seed == 0
    assert cfg.codec.K == CodecConfig().K
    assert 'seed' not in cfg.codec
    assert cfg.paths.codec is None


@pytest.mark.parametrize(
    'pair, section, key, value',
    [
        ('codec.K=4', 'codec', 'K', 4),
        ('train.lr=3e-4', 'train', 'lr', 3e-4),
        ('prompt.source=walrus', 'prompt', 'source', 'walrus'),
        ('prompt.steps=null', 'prompt', 'steps', None),
        ('probe.seeds=[4, 5]', 'probe', 'seeds', [4, 5]),
        ('fad.unbiased=false', 'fad', 'unbiased', False),
        (' codec.vocab = 64 ', 'codec', 'vocab', 64),
    ],
)
def test_set_pair(pair, section, key, value):
    cfg = RunConfig().set_pair(pair)
    assert cfg[section][key] == value


@pytest.mark.parametrize('pair', ['codec.K', 'codec.colour=1', 'nothing.K=1', 'seed.x=1'])
def test_set_pair_rejected(pair):
    with pytest.raises(ConfigError):
        RunConfig().set_pair(pair)


def test_build_injects_seed():
    cfg = RunConfig().set('seed', 11).set('codec.K', 3)
    codec = cfg.build(CodecConfig, 'codec')
    assert isinstance(codec, CodecConfig)
    assert (codec.K, codec.seed) == (3, 11)


def test_build_extra_and_tuples():
    cfg = RunConfig().set_pair('probe.seeds=[7]')
    probe = cfg.build(ProbeConfig, 'probe')
    assert probe.seeds == (7,)
    assert cfg.set('seed', 11).build(ProbeConfig, 'probe').seed == 11
    m = cfg.build(MatmConfig, 'matm', K=2, vocab=16)
    assert (m.K, m.vocab) == (2, 16)


def test_build_validates():
    cfg = RunConfig().set('probe.split', 1.5)
    with pytest.raises(ConfigError):
        cfg.build(ProbeConfig, 'probe')


def test_save_load(tmp_path):
    cfg = RunConfig().set_pair('codec.K=5').set_pair('seed=3')
    path = cfg.save(tmp_path / 'sub' / 'run.json')
    d = json.loads(path.read_text())
    assert d['codec']['K'] == 5
    back = RunConfig().load(path)
    assert back.to_dict() == cfg.to_dict()
    assert back.to_dict() == d


def test_load_partial(tmp_path):
    path = tmp_path / 'run.json'
    path.write_text(json.dumps({'train': {'iterations': 9}}))
    cfg = RunConfig().load(path)
    assert cfg.train.iterations == 9
    assert cfg.train.lr == RunConfig().train.lr


@pytest.mark.parametrize('content', ['{"codec": {"Q": 1}}', '{not json'])
def test_load_rejected(tmp_path, content):
    path = tmp_path / 'run.json'
    path.write_text(content)
    with pytest.raises(ConfigError):
        RunConfig().load(path)


def test_load_missing(tmp_path):
    with pytest.raises(ConfigError, match='cannot read config'):
        RunConfig().load(tmp_path / 'none.json')
