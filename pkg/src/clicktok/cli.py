"""clicktok command line: corpus, training, translation and evaluation."""

__all__ = ['main', 'build_parser']

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pyarrow as pa
import pyarrow.csv
import torch

from . import (
    ERROR,
    ClicktokError,
    ConfigError,
    __version__,
    add_logfile,
    logger,
    relpath,
    set_verbosity,
)
from .audio import denoise, detect_onsets, load_wav, prepare, write_wav
from .codec import Codec, CodecConfig, train_codec
from .config import RunConfig
from .eval import (
    ProbeConfig,
    builtin_embeddings,
    calibrate_embeddings,
    fad_report,
    fleiss_kappa,
    natural_baseline,
    recon_error_study,
    train_probe,
)
from .eval.kappa import RatingsFile
from .func import substream
from .matm import (
    LoraAdapter,
    LoraConfig,
    Matm,
    MatmConfig,
    Trainer,
    TrainConfig,
    eval_loss,
    finetune,
    merge_lora,
)
from .synthdata import CorpusConfig, DatasetManifest, build_corpus
from .vamp import PromptSettings, prompt_settings, translate


def _write_csv(table: pa.Table, fpath) -> Path:
    fpath = Path(fpath)
    fpath.parent.mkdir(parents=True, exist_ok=True)
    pyarrow.csv.write_csv(table, fpath)
    logger.info(f"wrote '{relpath(fpath)}'")
    return fpath


def _write_json(d: dict, fpath) -> Path:
    fpath = Path(fpath)
    fpath.parent.mkdir(parents=True, exist_ok=True)
    with open(fpath, 'w') as fh:
        json.dump(d, fh, indent=2, sort_keys=True)
    return fpath


def _path(cfg: RunConfig, key: str) -> Path:
    p = cfg.paths[key]
    if p is None:
        flag = key.replace('_', '-')
        ERROR(f"no {key} given, use --{flag} or paths.{key}", ConfigError)
    return Path(p)


def _manifest(cfg: RunConfig, key: str = 'corpus') -> DatasetManifest:
    p = _path(cfg, key)
    return DatasetManifest.load(p / 'manifest.json' if p.is_dir() else p)


def _clips(codec: Codec, manifest: DatasetManifest, entries) -> list:
    return [prepare(w, codec.sample_rate) for w in manifest.waveforms(entries)]


def _grids(codec: Codec, manifest: DatasetManifest, split: str) -> list:
    entries = manifest.select(split)
    return [codec.tokenize(w) for w in _clips(codec, manifest, entries)]


def _model(cfg: RunConfig, variant: str = 'full') -> Matm:
    """base model with the adapters of a variant merged in"""
    model = Matm.load(_path(cfg, 'matm'))
    if variant in ('domain', 'full') and cfg.paths.domain_adapter is not None:
        adapter = LoraAdapter.load(_path(cfg, 'domain_adapter'), model)
        model = merge_lora(model, adapter)
    elif variant == 'domain':
        ERROR("variant 'domain' needs --domain-adapter", ConfigError)
    if variant == 'full':
        adapter = LoraAdapter.load(_path(cfg, 'species_adapter'), model)
        model = merge_lora(model, adapter)
    return model.eval()


def _prompt(cfg: RunConfig, source: str = None) -> PromptSettings:
    p = dict(cfg.prompt)
    default_source = p.pop('source')
    source = default_source if source is None else source
    overrides = {k: v for k, v in p.items() if v is not None}
    return prompt_settings(source, seed=cfg.seed, **overrides)


def _wav_dir(path) -> list:
    path = Path(path)
    files = sorted(path.glob('*.wav')) if path.is_dir() else [path]
    if not files:
        ERROR(f"no .wav files in '{path}'")
    return [load_wav(f) for f in files]


# -----------------------------------------------


def cmd_synth(args, cfg: RunConfig):
    corpus = cfg.build(CorpusConfig, 'corpus')
    build_corpus(corpus, Path(cfg.out_dir) / 'corpus', workers=cfg.threads)


def cmd_train_codec(args, cfg: RunConfig):
    manifest = _manifest(cfg)
    clips = [
        prepare(w, manifest.sample_rate)
        for w in manifest.waveforms(manifest.select('train'))
    ]
    codec = train_codec(clips, cfg.build(CodecConfig, 'codec'))
    out = Path(cfg.out_dir)
    codec.save(out / 'codec')
    _write_csv(pa.Table.from_pandas(codec.curve, preserve_index=False), out / 'codec_curve.csv')

    test = manifest.waveforms(manifest.select('test')[:8])
    errors = []
    for w in test:
        x = prepare(w, codec.sample_rate)
        xh = codec.reconstruct(x)
        errors.append(np.linalg.norm(x.samples - xh.samples) / np.linalg.norm(x.samples))
    if errors:
        logger.info(f"held-out relative waveform error {np.mean(errors):.4f}")


def cmd_train_matm(args, cfg: RunConfig):
    codec = Codec.load(_path(cfg, 'codec'))
    manifest = _manifest(cfg)
    train, test = _grids(codec, manifest, 'train'), _grids(codec, manifest, 'test')
    mc = cfg.build(MatmConfig, 'matm', K=codec.K, vocab=codec.vocab)
    if max(g.L for g in train) > mc.max_len:
        ERROR(f"clips are longer than max_len={mc.max_len} columns", ConfigError)

    torch.manual_seed(cfg.seed)
    model = Matm(mc)
    trainer = Trainer(model, cfg.build(TrainConfig, 'train'))
    curve = trainer.fit(train)
    out = Path(cfg.out_dir)
    model.eval().save(out / 'matm')
    _write_csv(pa.Table.from_pandas(curve, preserve_index=False), out / 'loss.csv')
    metrics = {'train_steps': len(curve), 'sha256': model.sha256}
    if test:
        metrics['heldout_loss'] = eval_loss(model, test, seed=cfg.seed)
        logger.info(f"held-out masked cross entropy {metrics['heldout_loss']:.4f}")
    _write_json(metrics, out / 'matm_metrics.json')


def cmd_finetune(args, cfg: RunConfig):
    codec = Codec.load(_path(cfg, 'codec'))
    key = 'domain_corpus' if args.phase == 'domain' and cfg.paths.domain_corpus else 'corpus'
    manifest = _manifest(cfg, key)
    grids = _grids(codec, manifest, 'train')
    test = _grids(codec, manifest, 'test')

    base = Matm.load(_path(cfg, 'matm'))
    if args.phase == 'species':
        adapter = LoraAdapter.load(_path(cfg, 'domain_adapter'), base)
        base = merge_lora(base, adapter)
    tc = cfg.build(TrainConfig, 'train', **cfg.finetune)
    adapter = finetune(base, grids, cfg.build(LoraConfig, 'lora'), tc)

    out = Path(cfg.out_dir)
    adapter.save(out / f"{args.phase}.lora")
    metrics = {'phase': args.phase, 'base_sha256': adapter.base_sha256}
    if test:
        metrics['base_loss'] = eval_loss(base, test, seed=cfg.seed)
        metrics['adapted_loss'] = eval_loss(merge_lora(base, adapter), test, seed=cfg.seed)
        logger.info(
            f"held-out loss {metrics['base_loss']:.4f} ->"
            f" {metrics['adapted_loss']:.4f} after {args.phase} finetuning"
        )
    _write_json(metrics, out / f"{args.phase}_metrics.json")


def cmd_translate(args, cfg: RunConfig):
    codec = Codec.load(_path(cfg, 'codec'))
    variant = 'full' if cfg.paths.species_adapter else 'domain' if cfg.paths.domain_adapter else 'base'
    model = _model(cfg, variant)
    s = _prompt(cfg, args.source)
    logger.info(f"prompt settings: {s}")
    context = cfg.translate.context
    context = load_wav(context) if context else None

    out = translate(codec, model, load_wav(args.input), s, context)
    fpath = Path(cfg.out_dir) / (args.output or f"{Path(args.input).stem}.translated.wav")
    write_wav(fpath, out)
    logger.info(f"wrote '{relpath(fpath)}' ({out.duration:.3f} s)")


def _generate(cfg: RunConfig, variant: str, prompts) -> list:
    codec = Codec.load(_path(cfg, 'codec'))
    if variant == 'tokenizer':
        return [codec.reconstruct(prepare(w, codec.sample_rate)) for w in prompts]
    model = _model(cfg, variant)
    base = _prompt(cfg)
    return [
        translate(codec, model, w, replace(base, seed=base.seed + i))
        for i, w in enumerate(prompts)
    ]


def _embedding(cfg: RunConfig, name: str, variant: str = 'full'):
    codec = Codec.load(cfg.paths.codec) if cfg.paths.codec else None
    model = None
    if name == 'matm':
        model = _model(cfg, variant)
    return builtin_embeddings(codec, model, [name], seed=cfg.seed)[0]


def cmd_eval_fad(args, cfg: RunConfig):
    sets = {}
    for d in args.sets:
        name = str(d)
        while name in sets:
            name += '#2'
        sets[name] = _wav_dir(d)
    if args.variant:
        if not args.prompts:
            ERROR("--variant needs --prompts", ConfigError)
        sets[args.variant] = _generate(cfg, args.variant, _wav_dir(args.prompts))

    m = _embedding(cfg, cfg.fad.embedding)
    vectors = {k: m.embed_many(v, cfg.threads) for k, v in sets.items()}
    reference = cfg.fad.reference or (str(args.sets[0]) if args.variant else None)
    baseline = None
    if reference is not None and len(vectors[reference]) >= 4:
        baseline = natural_baseline(
            vectors[reference], substream(cfg.seed, 'fad-baseline'), cfg.fad.unbiased
        )
    report = fad_report(vectors, reference, baseline, cfg.fad.unbiased)
    report.save(cfg.out_dir)
    if report.indistinguishable:
        logger.info(f"within the natural baseline: {report.indistinguishable}")


def cmd_calibrate(args, cfg: RunConfig):
    manifest = _manifest(cfg)
    entries = [e for e in manifest.select() if e.labels['detection'] == 'coda']
    codas = manifest.waveforms(entries)
    if not codas:
        ERROR("corpus holds no coda clips to calibrate on")
    denoised = [
        denoise(w, detect_onsets(w, **cfg.onsets), **cfg.denoise) for w in codas
    ]
    names = args.embeddings or [
        n
        for n, ok in [
            ('matm', cfg.paths.matm and cfg.paths.codec),
            ('tokenizer', cfg.paths.codec),
            ('random', True),
            ('onset', True),
        ]
        if ok
    ]
    models = [_embedding(cfg, n) for n in names]
    df = calibrate_embeddings(codas, denoised, models, cfg.threads)
    _write_csv(pa.Table.from_pandas(df, preserve_index=False), Path(cfg.out_dir) / 'calibration.csv')


def cmd_eval_recon(args, cfg: RunConfig):
    codec = Codec.load(_path(cfg, 'codec'))
    manifest = _manifest(cfg)
    corpus = _clips(codec, manifest, manifest.select('test'))
    for ms in args.chunk_ms or cfg.recon.chunk_ms:
        study = recon_error_study(codec, corpus, float(ms))
        _write_csv(study.to_table(), Path(cfg.out_dir) / f"recon_{ms}ms.csv")


def cmd_eval_probe(args, cfg: RunConfig):
    task = args.task or cfg.probe.task
    variant = args.variant or cfg.probe.variant
    manifest = _manifest(cfg)
    entries = manifest.select(task=task)
    if variant in ('full', 'domain', 'base', 'tokenizer'):
        codec = Codec.load(_path(cfg, 'codec'))
        if variant == 'tokenizer':
            m = builtin_embeddings(codec, None, ['tokenizer'])[0]
        else:
            m = builtin_embeddings(codec, _model(cfg, variant), ['matm'])[0]
    elif variant in ('random', 'onset'):
        m = _embedding(cfg, variant)
    else:
        ERROR(f"unknown probe variant '{variant}'", ConfigError)

    X = m.embed_many(manifest.waveforms(entries), cfg.threads)
    labels = [e.labels[task] for e in entries]
    result = train_probe(X, labels, cfg.build(ProbeConfig, 'probe'))
    out = Path(cfg.out_dir)
    _write_csv(result.to_table(task=task, variant=variant), out / f"probe_{task}_{variant}.csv")
    _write_json(
        {
            'task': task,
            'variant': variant,
            'accuracies': result.accuracies,
            'mean': result.mean,
            'stderr': result.stderr,
            'majority': result.majority,
            'classes': result.classes,
        },
        out / f"probe_{task}_{variant}.json",
    )


def cmd_kappa(args, cfg: RunConfig):
    kappa = fleiss_kappa(RatingsFile.read(args.ratings))
    print(f"{kappa:.6f}")
    _write_json({'kappa': kappa, 'ratings': str(args.ratings)}, Path(cfg.out_dir) / 'kappa.json')


# -----------------------------------------------


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors: logged, exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        ERROR(f"{self.prog}: {message}", ConfigError, exit=True)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    g = common.add_argument_group('run')
    g.add_argument('--config', type=Path, help='JSON config file')
    g.add_argument('--seed', type=int)
    g.add_argument('--threads', type=int)
    g.add_argument('--out-dir', type=Path)
    g.add_argument('--set', action='append', metavar='SECTION.KEY=VALUE')
    g.add_argument('-v', '--verbose', action='count')
    p = common.add_argument_group('paths')
    for key in ('corpus', 'domain-corpus', 'codec', 'matm', 'domain-adapter', 'species-adapter'):
        p.add_argument(f'--{key}', type=Path)

    parser = _Parser(prog='clicktok', description=__doc__, parents=[common])
    parser.add_argument('--version', action='version', version=__version__)
    sub = parser.add_subparsers(dest='command', required=True)

    def add(name, func, help):
        sp = sub.add_parser(name, parents=[common], help=help)
        sp.set_defaults(func=func)
        return sp

    add('synth', cmd_synth, 'write a labelled synthetic click corpus')
    add('train-codec', cmd_train_codec, 'fit the tokenizer')
    add('train-matm', cmd_train_matm, 'train the masked token model')
    sp = add('finetune', cmd_finetune, 'train a low-rank adapter')
    sp.add_argument('--phase', choices=['domain', 'species'], default='domain')
    sp = add('translate', cmd_translate, 'translate a wav into the corpus style')
    sp.add_argument('input', type=Path)
    sp.add_argument('--source', default=None, help='prompt table row, e.g. codas')
    sp.add_argument('--output', default=None)
    sp = add('eval-fad', cmd_eval_fad, 'Frechet distances between wav sets')
    sp.add_argument('sets', nargs='+', type=Path)
    sp.add_argument('--variant', choices=['tokenizer', 'base', 'domain', 'full'], default=None)
    sp.add_argument('--prompts', type=Path, default=None)
    sp = add('calibrate', cmd_calibrate, 'noise versus structure weight of embeddings')
    sp.add_argument('--embeddings', nargs='+', default=None)
    sp = add('eval-recon', cmd_eval_recon, 'per-frequency reconstruction error')
    sp.add_argument('--chunk-ms', nargs='+', type=float, default=None)
    sp = add('eval-probe', cmd_eval_probe, 'downstream probe accuracy')
    sp.add_argument('--task', choices=['detection', 'rhythm', 'unit', 'vowel'], default=None)
    sp.add_argument(
        '--variant',
        choices=['full', 'domain', 'base', 'tokenizer', 'random', 'onset'],
        default=None,
    )
    sp = add('kappa', cmd_kappa, "Fleiss's kappa of a ratings CSV")
    sp.add_argument('ratings', type=Path)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, 'config', None):
        cfg.load(args.config)
    for pair in getattr(args, 'set', []):
        cfg.set_pair(pair)
    for key in ('seed', 'threads'):
        if getattr(args, key, None) is not None:
            cfg[key] = getattr(args, key)
    if getattr(args, 'out_dir', None) is not None:
        cfg.out_dir = str(args.out_dir)
    for key in cfg.paths:
        if getattr(args, key, None) is not None:
            cfg.paths[key] = str(getattr(args, key))
    if cfg.threads < 1:
        ERROR(f"--threads must be >= 1, got {cfg.threads}", ConfigError)
    return cfg


def _set_threads(n: int):
    torch.set_num_threads(n)
    if n == 1:
        torch.use_deterministic_algorithms(True)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # --help and --version exit 0, usage errors ConfigError.exit_code
        return e.code if isinstance(e.code, int) else ConfigError.exit_code
    set_verbosity(getattr(args, 'verbose', 0))
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out_dir)
        add_logfile(out)
        _set_threads(cfg.threads)
        cfg.save(out / 'resolved_config.json')
        logger.debug(f"clicktok {__version__}: {args.command}")
        args.func(args, cfg)
    except ClicktokError as e:
        return e.exit_code
    return 0


if __name__ == '__main__':
    sys.exit(main())
