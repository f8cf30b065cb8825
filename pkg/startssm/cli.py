import argparse
import datetime
import json
import logging
import os
import pathlib
import shutil
import stat
import sys

import numpy as np
import pandas as pd

from . import __version__
from . import ssm_keys as sk
from . import bench, harness, synthetic, verify
from .config import ExperimentConfig, apply_overrides, load_config, parse_gamma
from .domain_gap import matrix_domain_gaps, accumulation_trace, trace_to_dataframe
from .model import init_model, load_model, model_forward, save_model


logger = logging.getLogger(__name__)


MANIFEST_FILE = 'manifest.json'
COMPLETION_FILE = 'completion.json'
METRICS_FILE = 'metrics.csv'
SUMMARY_FILE = 'summary.json'
GAPS_CSV_FILE = 'gaps.csv'
GAPS_JSON_FILE = 'gaps.json'
MODELS_DIR = 'models'
ABLATION_FILE = 'ablation.csv'
TRACE_FILE = 'trace.csv'


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _write_csv(df: pd.DataFrame, path, index=False):
    df.to_csv(path, index=index, lineterminator='\n')


def _write_json(obj, path):
    with open(path, 'w', newline='\n') as f:
        f.write(json.dumps(obj, indent=2, sort_keys=True) + '\n')


def _remove(path: pathlib.Path):
    if path.is_dir():
        shutil.rmtree(path)
    else:
        # a previous manifest is read-only
        os.chmod(path, stat.S_IRUSR | stat.S_IWUSR)
        path.unlink()


def _prepare_out_dir(out, force, owned=()):
    """
    :param owned: names of the files and directories the command writes; with force, these and
        the manifest and completion records of an earlier run are removed first
    """
    out = pathlib.Path(out)
    if out.exists() and not out.is_dir():
        raise FileExistsError(f'output path exists and is not a directory: {out}')
    if out.is_dir() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f'output directory is not empty: {out} (use --force to write into it)')
        for name in (MANIFEST_FILE, COMPLETION_FILE) + tuple(owned):
            if (out / name).exists():
                logger.info(f'--force: removing {out / name}')
                _remove(out / name)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config is not None else ExperimentConfig()
    return apply_overrides(cfg, variant=getattr(args, 'variant', None), p_token=getattr(args, 'p_token', None),
                           apply_prob=getattr(args, 'apply_prob', None), seed=getattr(args, 'seed', None),
                           seeds=getattr(args, 'seeds', None), epochs=getattr(args, 'epochs', None))


def _arguments(args):
    """Command line arguments as JSON values, for the manifest."""
    return {key: str(value) if isinstance(value, pathlib.Path) else value
            for key, value in sorted(vars(args).items()) if key != 'func'}


def write_manifest(out: pathlib.Path, cfg: ExperimentConfig, command, outputs, args=None):
    """
    Written once before any work starts and made read-only; the end of the run is recorded
    separately in completion.json.
    """
    manifest = {
        'command': command,
        'arguments': _arguments(args) if args is not None else {},
        'tool_version': __version__,
        'config': cfg.to_dict(),
        'seeds': list(cfg.seeds),
        'started': _now(),
        'outputs': {name: str(out / name) for name in outputs},
    }
    path = out / MANIFEST_FILE
    _write_json(manifest, path)
    os.chmod(path, stat.S_IRUSR | stat.S_IRGRP | stat.S_IROTH)
    return manifest


def write_completion(out: pathlib.Path, status):
    _write_json({'finished': _now(), 'status': status}, out / COMPLETION_FILE)


def cmd_train(args):
    cfg = _resolve_config(args)
    outputs = [METRICS_FILE, SUMMARY_FILE, GAPS_CSV_FILE, MODELS_DIR]
    out = _prepare_out_dir(args.out, args.force, outputs)
    write_manifest(out, cfg, 'train', outputs, args)
    result = harness.run_lodo(cfg, keep_models=True)

    _write_csv(result.metrics, out / METRICS_FILE)
    (out / SUMMARY_FILE).write_text(result.summary_json() + '\n')
    if result.gaps:
        _write_csv(pd.concat([report.pairs.assign(layer=report.layer) for report in result.gaps], ignore_index=True),
                   out / GAPS_CSV_FILE)
    models_dir = out / MODELS_DIR
    models_dir.mkdir(exist_ok=True)
    for (seed, held_out), model in result.models.items():
        save_model(model, models_dir / f'seed{seed}_heldout{held_out}.json')
    write_completion(out, 'ok')
    print(result.accuracy_table().to_string())
    logger.info(f'mean target accuracy of {result.variant}: {result.mean_accuracy:.4f}')
    return sk.EXIT_OK


def _gap_banks(cfg: ExperimentConfig, halves=None):
    ds = synthetic.synth_dataset(cfg.synth)
    banks = synthetic.domain_batches(ds)
    if halves is None:
        return banks
    if halves not in banks:
        raise ValueError(f'domain {halves} not in the dataset; domains={sorted(banks)}')
    x = banks[halves]
    order = np.random.default_rng(cfg.seeds[0]).permutation(x.shape[0])
    middle = x.shape[0] // 2
    return {f'{halves}a': x[order[:middle]], f'{halves}b': x[order[middle:]]}


def cmd_analyze_gap(args):
    cfg = load_config(args.config) if args.config is not None else ExperimentConfig()
    model = load_model(args.model)
    gamma = parse_gamma(args.gamma)
    if not -model.depth <= args.layer < model.depth:
        raise ValueError(f'layer index {args.layer} out of range for a model of depth {model.depth}')
    outputs = [GAPS_CSV_FILE, GAPS_JSON_FILE]
    out = _prepare_out_dir(args.out, args.force, outputs)
    write_manifest(out, cfg, 'analyze-gap', outputs, args)
    report = matrix_domain_gaps(model, _gap_banks(cfg, args.halves), layer=args.layer, gamma_mode=gamma)
    report.to_csv(out / GAPS_CSV_FILE)
    report.to_json(out / GAPS_JSON_FILE)
    write_completion(out, 'ok')
    print(pd.Series(report.gaps).to_string())
    return sk.EXIT_OK


def cmd_verify(args):
    results = verify.run_checks(filter=args.filter, break_scan=args.break_scan)
    print(verify.results_table(results).to_string(index=False))
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.error(f'{len(failed)} check(s) failed: {failed}')
        return sk.EXIT_FAILURE
    return sk.EXIT_OK


def cmd_bench(args):
    table = bench.time_scans(lengths=args.lengths, D=args.D, N=args.N, repeats=args.repeats)
    if args.out is not None:
        _write_csv(table, args.out)
    else:
        sys.stdout.write(table.to_csv(index=False, lineterminator='\n'))
    passed, detail = bench.check_linearity(table)
    if not passed:
        logger.error(f'linearity check failed: {detail}')
        return sk.EXIT_FAILURE
    logger.info(detail)
    return sk.EXIT_OK


def cmd_ablate(args):
    cfg = _resolve_config(args)
    out = _prepare_out_dir(args.out, args.force, [ABLATION_FILE])
    if args.sweep is not None:
        policies = harness.p_token_sweep(cfg.train.policy, args.sweep)
    else:
        policies = harness.default_ablation_policies(cfg.train.policy)
    write_manifest(out, cfg, 'ablate', [ABLATION_FILE], args)
    table = harness.run_ablation(cfg, policies)
    _write_csv(table, out / ABLATION_FILE, index=True)
    write_completion(out, 'ok')
    print(table.to_string())
    return sk.EXIT_OK


def cmd_trace(args):
    cfg = load_config(args.config) if args.config is not None else ExperimentConfig()
    if args.model is not None:
        model = load_model(args.model)
    else:
        model = init_model(cfg.model, np.random.default_rng(cfg.seeds[0]))
    if not -model.depth <= args.layer < model.depth:
        raise ValueError(f'layer index {args.layer} out of range for a model of depth {model.depth}')
    banks = synthetic.domain_batches(synthetic.synth_dataset(cfg.synth))
    domain_s, domain_t = args.domains
    for domain in (domain_s, domain_t):
        if domain not in banks:
            raise ValueError(f'domain {domain} not in the dataset; domains={sorted(banks)}')
    out = _prepare_out_dir(args.out, args.force, [TRACE_FILE])
    write_manifest(out, cfg, 'trace', [TRACE_FILE], args)
    # mean embedding of the block input over the samples of each domain
    means = [model_forward(banks[domain], model)[1].blocks[args.layer].input.mean(axis=0)
             for domain in (domain_s, domain_t)]
    trace = accumulation_trace(means[0], means[1], model.blocks[args.layer], mode=model.mode)
    _write_csv(trace_to_dataframe(trace), out / TRACE_FILE)
    write_completion(out, 'ok')
    return sk.EXIT_OK


def _int_list(value):
    return [int(v) for v in value.split(',')]


def _float_list(value):
    return [float(v) for v in value.split(',')]


def _add_experiment_args(parser):
    parser.add_argument('--config', type=pathlib.Path, default=None, help='INI or JSON experiment config')
    parser.add_argument('--variant', choices=sorted(sk.CLI_VARIANT_NAMES), default=None)
    parser.add_argument('--p-token', type=float, default=None, dest='p_token')
    parser.add_argument('--apply-prob', type=float, default=None, dest='apply_prob')
    parser.add_argument('--seed', type=int, default=None, help='first seed')
    parser.add_argument('--seeds', type=int, default=None, help='number of consecutive seeds')
    parser.add_argument('--epochs', type=int, default=None)
    parser.add_argument('--out', type=pathlib.Path, required=True)
    parser.add_argument('--force', action='store_true', help='write into a non-empty output directory')


def build_parser():
    parser = argparse.ArgumentParser(prog='startssm', description='selective state space models with '
                                     'saliency-driven token-aware augmentation')
    parser.add_argument('--verbose', '-v', action='store_true')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('train', help='leave-one-domain-out training on the synthetic benchmark')
    _add_experiment_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('analyze-gap', help='domain gaps of a trained model')
    p.add_argument('--model', type=pathlib.Path, required=True)
    p.add_argument('--config', type=pathlib.Path, default=None)
    p.add_argument('--layer', type=int, default=-1)
    p.add_argument('--gamma', default=sk.GAMMA_MEDIAN, help="'median' or a positive bandwidth")
    p.add_argument('--halves', type=int, default=None,
                   help='compare two random halves of this domain instead of the domains')
    p.add_argument('--out', type=pathlib.Path, required=True)
    p.add_argument('--force', action='store_true')
    p.set_defaults(func=cmd_analyze_gap)

    p = sub.add_parser('verify', help='run the invariant suite')
    p.add_argument('--filter', default=None, help='check group or name fragment')
    p.add_argument('--break-scan', action='store_true', dest='break_scan',
                   help='perturb the parallel scan output to demonstrate a failing check')
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser('bench', help='time the sequential and parallel scans')
    p.add_argument('--lengths', type=_int_list, default=list(bench.BENCH_LENGTHS))
    p.add_argument('--D', type=int, default=4)
    p.add_argument('--N', type=int, default=4)
    p.add_argument('--repeats', type=int, default=3)
    p.add_argument('--out', type=pathlib.Path, default=None, help='CSV file (default: stdout)')
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser('ablate', help='ablation matrix or p_token sweep')
    _add_experiment_args(p)
    p.add_argument('--sweep', type=_float_list, default=None, help='comma separated p_token values')
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser('trace', help='token-by-token accumulation of the gap between two domains')
    p.add_argument('--config', type=pathlib.Path, default=None)
    p.add_argument('--model', type=pathlib.Path, default=None, help='trained model (default: initialisation)')
    p.add_argument('--layer', type=int, default=0)
    p.add_argument('--domains', type=_int_list, default=[0, 1], help='two comma separated domain ids')
    p.add_argument('--out', type=pathlib.Path, required=True)
    p.add_argument('--force', action='store_true')
    p.set_defaults(func=cmd_trace)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(format='%(asctime)s - %(levelname)s - %(name)s - %(message)s',
                        level=logging.DEBUG if args.verbose else logging.INFO)
    if getattr(args, 'domains', None) is not None and len(args.domains) != 2:
        parser.error(f'--domains takes exactly two domain ids; got {args.domains}')
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, FileExistsError) as e:
        logger.error(f'{type(e).__name__}: {e}')
        print(f'error: {e}', file=sys.stderr)
        return sk.EXIT_USAGE
    except FloatingPointError as e:
        logger.error(f'numerical failure: {e}')
        return sk.EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())
