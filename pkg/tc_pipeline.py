#!/usr/bin/env python3
# Copyright (c) 2025 Michael Litvin
# Licensed under AGPL-3.0-or-later - see LICENSE file for details
"""Superconductor Tc pipeline: composition parsing, two-stage training of
branched regression/classification networks, evaluation and prediction.

Subcommands (data on stdout, diagnostics on stderr):
  train --data CSV [--config YAML] [--out DIR] [--seeds 0,1,2] [--variant fcnn|cnn]
        [--epochs N | --stage1-epochs N --stage2-epochs N] [--decay-epoch N] [--jobs N]
                                     one replica per split seed; prints report.json
  evaluate --checkpoint FILE --data CSV
                                     metrics JSON plus the majority-class baseline
  predict --checkpoint FILE (--formula F ... | --formulas-file TXT)
                                     CSV: formula,tc_pred_K,sc_score,sc_label
  screen --checkpoint FILE --template "Mo20{X}6{Z}4" --substitute X=Re,Rh,Ru --substitute Z=Ge,Si
                                     predict for every substitution of the template
  split --data CSV [--seeds ...] [--out DIR]
                                     write split_<seed>.json index files
  histogram --data CSV --bin-width W [--out TSV]
                                     Tc histogram as TSV with a trailing mean line
  gradcheck [--variant fcnn|cnn] [--seed N]
                                     finite-difference check of every layer; one JSON
                                     document whose "status" is "max_rel_err < 1e-4"

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure. Errors print
`error: <category>` and a human-readable detail on the next line.

Environment (.env is read): TC_OUTPUT_DIR, default --out for train and split.
"""
import argparse
import itertools
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd
from dotenv import load_dotenv

sys.path.append(str(Path(__file__).parent))

from shared.dataset import EmptyDataset, load_csv, split, tc_histogram
from shared.errors import EXIT_USAGE, PipelineError
from shared.formula_parser import format_composition, parse_formulas
from shared.gradcheck import DEFAULT_SEEDS, verify
from shared.metrics import majority_baseline
from shared.model import VARIANTS, load, predict
from shared.run_config import RunConfig, default_output_dir
from shared.trainer import evaluate, run_experiment

load_dotenv()

logger = logging.getLogger(__name__)

PREDICTION_COLUMNS = ['formula', 'tc_pred_K', 'sc_score', 'sc_label']
PASS_LINE = 'max_rel_err < 1e-4'


class UsageError(PipelineError):
    category = 'usage'
    exit_code = EXIT_USAGE


class _Parser(argparse.ArgumentParser):
    """argparse with the usage exit code of this tool"""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: usage\n{self.prog}: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _seed_list(text: str) -> List[int]:
    try:
        seeds = [int(s) for s in text.split(',') if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def _print_predictions(formulas: Sequence[str], network) -> None:
    compositions = parse_formulas(formulas)
    predictions = predict(network, compositions)
    frame = pd.DataFrame(
        [(f, p.tc_pred, p.sc_score, p.sc_label) for f, p in zip(formulas, predictions)],
        columns=PREDICTION_COLUMNS)
    frame.to_csv(sys.stdout, index=False, lineterminator='\n', float_format='%.6f')


def _dump(data) -> None:
    print(json.dumps(data, indent=1))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    run_config = RunConfig(args.config)
    variant = args.variant or run_config.variant
    model_config = run_config.model_config(variant)
    stage1 = args.stage1_epochs or args.epochs
    stage2 = args.stage2_epochs or args.epochs
    schedule = run_config.schedule(
        variant,
        stage1_epochs=stage1, stage2_epochs=stage2, decay_epoch=args.decay_epoch,
        lr_initial=args.lr, lr_decayed=args.lr_decayed, batch_size=args.batch_size,
        optimizer=args.optimizer, splits=tuple(args.seeds) if args.seeds else None,
    )
    records = load_csv(args.data)
    if not records:
        raise EmptyDataset(f"{args.data} has no records")

    out_dir = args.out or default_output_dir()
    logger.info(f"Training {variant} on {len(records)} records, splits {list(schedule.splits)} -> {out_dir}")
    report = run_experiment(records, model_config, schedule, out_dir, jobs=args.jobs)
    _dump(report)
    return 0


def cmd_evaluate(args) -> int:
    network = load(args.checkpoint, args.variant)
    records = load_csv(args.data)
    if not records:
        raise EmptyDataset(f"{args.data} has no records")
    report = evaluate(network, records)
    _dump({
        'checkpoint': str(args.checkpoint),
        'variant': network.config.variant,
        'metrics': report.to_dict(),
        'baseline': majority_baseline([r.label for r in records]).to_dict(),
    })
    return 0


def cmd_predict(args) -> int:
    formulas = list(args.formula or [])
    if args.formulas_file:
        try:
            lines = args.formulas_file.read_text(encoding='utf-8').splitlines()
        except (OSError, UnicodeDecodeError) as e:
            raise UsageError(f"cannot read {args.formulas_file}: {e}") from e
        formulas += [line.strip() for line in lines if line.strip() and not line.startswith('#')]
    if not formulas:
        raise UsageError("give at least one --formula or a non-empty --formulas-file")
    network = load(args.checkpoint, args.variant)
    _print_predictions(formulas, network)
    return 0


def expand_template(template: str, substitutions: Dict[str, List[str]]) -> List[str]:
    """Every formula obtained by filling the {NAME} slots of `template`"""
    names = list(substitutions)
    formulas = []
    for values in itertools.product(*(substitutions[n] for n in names)):
        try:
            formulas.append(template.format(**dict(zip(names, values))))
        except (KeyError, IndexError, ValueError) as e:
            raise UsageError(f"template {template!r} does not match the substitutions: {e}") from e
    return formulas


def _substitution(text: str):
    name, sep, values = text.partition('=')
    options = [v.strip() for v in values.split(',') if v.strip()]
    if not sep or not name.strip() or not options:
        raise argparse.ArgumentTypeError(f"expected NAME=A,B,..., got {text!r}")
    return name.strip(), options


def cmd_screen(args) -> int:
    substitutions = dict(args.substitute or [])
    formulas = expand_template(args.template, substitutions)
    network = load(args.checkpoint, args.variant)
    if args.canonical:
        formulas = [format_composition(c) for c in parse_formulas(formulas)]
    logger.info(f"Screening {len(formulas)} compositions from {args.template}")
    _print_predictions(formulas, network)
    return 0


def cmd_split(args) -> int:
    records = load_csv(args.data)
    run_config = RunConfig(args.config)
    schedule = run_config.schedule(splits=tuple(args.seeds) if args.seeds else None)
    test_fraction = args.test_fraction or schedule.test_fraction
    out_dir = Path(args.out or default_output_dir())
    out_dir.mkdir(parents=True, exist_ok=True)

    written = {}
    for seed in schedule.splits:
        split_set = split(records, seed, test_fraction)
        path = out_dir / f"split_{seed}.json"
        path.write_text(json.dumps(split_set.to_dict()) + '\n', encoding='utf-8')
        written[str(seed)] = {'path': str(path), 'n_train': len(split_set.train_indices),
                              'n_test': len(split_set.test_indices)}
        logger.info(f"Wrote {path}")
    _dump(written)
    return 0


def cmd_histogram(args) -> int:
    records = load_csv(args.data)
    if not records:
        raise EmptyDataset(f"{args.data} has no records")
    text = tc_histogram(records, args.bin_width).to_tsv()
    if args.out:
        args.out.write_text(text, encoding='utf-8')
        logger.info(f"Wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    seeds = range(args.seed, args.seed + args.n_seeds)
    worst = verify(args.variant, seeds, corrupt=args.corrupt_gradient)
    _dump({
        'variant': args.variant,
        'seeds': [seeds.start, seeds.stop - 1],
        'checks': worst,
        'max_rel_err': max(worst.values()),
        'status': PASS_LINE,
    })
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument('--verbose', '-v', action='store_true', help='debug logging on stderr')
    sub = parser.add_subparsers(dest='command', required=True, parser_class=_Parser)

    p = sub.add_parser('train', help='two-stage training over all split seeds')
    p.add_argument('--data', type=Path, required=True, help='formula,tc CSV')
    p.add_argument('--config', type=Path, help='YAML merged over config/model_defaults.yaml')
    p.add_argument('--out', type=Path, help='output directory (default: $TC_OUTPUT_DIR or ./runs)')
    p.add_argument('--seeds', type=_seed_list, help='comma-separated split seeds')
    p.add_argument('--variant', choices=VARIANTS)
    p.add_argument('--epochs', type=_positive_int, help='epochs for both stages')
    p.add_argument('--stage1-epochs', type=_positive_int)
    p.add_argument('--stage2-epochs', type=_positive_int)
    p.add_argument('--decay-epoch', type=_positive_int)
    p.add_argument('--lr', type=_positive_float, help='initial learning rate')
    p.add_argument('--lr-decayed', type=_positive_float)
    p.add_argument('--batch-size', type=_positive_int)
    p.add_argument('--optimizer', choices=('adam', 'sgd'))
    p.add_argument('--jobs', type=_positive_int, default=1, help='splits trained concurrently')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('evaluate', help='metrics of a checkpoint on a CSV')
    p.add_argument('--checkpoint', type=Path, required=True)
    p.add_argument('--data', type=Path, required=True)
    p.add_argument('--variant', choices=VARIANTS, help='expected variant of the checkpoint')
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser('predict', help='predict Tc and superconductivity for formulas')
    p.add_argument('--checkpoint', type=Path, required=True)
    p.add_argument('--formula', action='append', help='repeatable')
    p.add_argument('--formulas-file', type=Path, help='one formula per line, # comments')
    p.add_argument('--variant', choices=VARIANTS, help='expected variant of the checkpoint')
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser('screen', help='predict over a substituted composition family')
    p.add_argument('--checkpoint', type=Path, required=True)
    p.add_argument('--template', required=True, help='formula with {NAME} slots')
    p.add_argument('--substitute', type=_substitution, action='append', required=True,
                   help='NAME=A,B,... (repeatable)')
    p.add_argument('--canonical', action='store_true', help='print canonical formulas')
    p.add_argument('--variant', choices=VARIANTS, help='expected variant of the checkpoint')
    p.set_defaults(func=cmd_screen)

    p = sub.add_parser('split', help='write seeded train/test index files')
    p.add_argument('--data', type=Path, required=True)
    p.add_argument('--config', type=Path)
    p.add_argument('--seeds', type=_seed_list)
    p.add_argument('--test-fraction', type=float)
    p.add_argument('--out', type=Path)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser('histogram', help='Tc histogram of a CSV')
    p.add_argument('--data', type=Path, required=True)
    p.add_argument('--bin-width', type=_positive_float, required=True)
    p.add_argument('--out', type=Path, help='TSV file (default: stdout)')
    p.set_defaults(func=cmd_histogram)

    p = sub.add_parser('gradcheck', help='finite-difference gradient verification')
    p.add_argument('--variant', choices=VARIANTS, default='fcnn')
    p.add_argument('--seed', type=int, default=0, help='first of the consecutive seeds')
    p.add_argument('--n-seeds', type=_positive_int, default=DEFAULT_SEEDS)
    p.add_argument('--corrupt-gradient', action='store_true', help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        stream=sys.stderr,
    )
    if args.command == 'split' and args.test_fraction is not None and not 0 < args.test_fraction < 1:
        print(f"error: usage\n--test-fraction must be in (0, 1), got {args.test_fraction}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except PipelineError as e:
        logger.debug("Command failed", exc_info=True)
        print(f"error: {e.category}\n{e}", file=sys.stderr)
        return e.exit_code


if __name__ == '__main__':
    sys.exit(main())
