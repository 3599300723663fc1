#!/usr/bin/env python3
"""
Command-line entry point for DARCCC experiments.

One subcommand per experiment stage: train, calibrate, attack, detect, eval,
recon-grid and report. Every command writes run_manifest.json beside its
outputs.
"""
import argparse
import glob
import json
import logging
import os
import platform
import sys

import numpy as np

from attacks import AttackSpec, blackbox_transfer, load_adversarial_batch, run_attack, save_adversarial_batch
from checkpoint import config_from_entries, load_checkpoint, save_checkpoint
from darccc import (
    calibrate,
    classify_by_distance,
    curve_row,
    distance_histogram,
    flag,
    load_threshold,
    read_report_summary,
    reconstruct_all_classes,
    reconstruction_distances,
    report,
    separation_auc,
    store_threshold,
    write_curves_csv,
    write_histogram_csv,
    write_pgm,
    write_report_csv,
)
from data_io import DATA_DIR, DATASET_NAMES, DEFAULT_VAL_FRACTION, load_dataset, split, subset
from errors import CalibrationError, CheckpointError, ConfigError, DarcccError
from models import ModelConfig, build_model
from training import TrainConfig, metrics_path_for, model_from_checkpoint, model_to_checkpoint, train

OUT_DIR = os.getenv('DARCCC_OUT_DIR', os.path.join(os.getcwd(), 'runs'))
LOG_DIR = os.getenv('DARCCC_LOG_DIR', os.path.join(os.getcwd(), 'logs'))
MANIFEST_NAME = 'run_manifest.json'

ARCH_CHOICES = ("capsule", "cnn_r", "masked_cnn_r", "attacker", "attacker_cnn")
ARCH_ALIASES = {"attacker": "attacker_cnn"}
DEFAULT_EPS_GRID = "0,0.05,0.1,0.15,0.2,0.25,0.3"


def setup_logging():
    """Log to the console and to darccc.log in the log directory."""
    log_path = os.path.join(LOG_DIR, 'darccc.log')
    try:
        os.makedirs(LOG_DIR, exist_ok=True)
        handlers = [
            logging.FileHandler(log_path, encoding='utf-8'),
            logging.StreamHandler()
        ]
    except Exception:
        handlers = [logging.StreamHandler()]
    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s [%(levelname)s] %(message)s',
        handlers=handlers
    )
    logging.info("Logging initialized: %s", log_path)


class UsageParser(argparse.ArgumentParser):
    """argparse parser whose usage errors exit with status 1"""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"ERROR: {message}", file=sys.stderr)
        raise SystemExit(1)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def write_manifest(directory, command, args):
    """Command, flags, seed and library versions, enough to re-run the command"""
    os.makedirs(directory, exist_ok=True)
    flags = {key: value for key, value in sorted(vars(args).items()) if key not in ('handler', 'command')}
    manifest = {
        'command': command,
        'flags': flags,
        'seed': args.seed,
        'numpy_version': np.__version__,
        'python_version': platform.python_version(),
    }
    path = os.path.join(directory, MANIFEST_NAME)
    with open(path, 'w', encoding='utf-8') as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write('\n')
    return path


def parse_model_options(architecture, options):
    """ModelConfig from the architecture plus repeated key=value overrides"""
    entries = {'model.architecture': architecture}
    known = set(ModelConfig.__dataclass_fields__)
    for option in options or []:
        key, sep, value = option.partition('=')
        if not sep or key not in known:
            raise ConfigError(f"bad --model-option {option!r}; expected key=value with key in ModelConfig")
        entries[f'model.{key}'] = value
    try:
        return config_from_entries(ModelConfig, entries, prefix='model.')
    except CheckpointError as exc:
        raise ConfigError(f"bad --model-option: {exc}") from exc


def load_model(path):
    checkpoint = load_checkpoint(path)
    return checkpoint, model_from_checkpoint(checkpoint)


def dataset_name(args, checkpoint):
    name = args.dataset or checkpoint.config.get('data.dataset')
    if name is None:
        raise ConfigError("no --dataset given and the checkpoint does not record one")
    return name


def data_split(args, checkpoint):
    """Rebuild the train/validation split the checkpoint was trained on"""
    name = dataset_name(args, checkpoint)
    seed = int(checkpoint.config.get('data.seed', args.seed))
    val_fraction = float(checkpoint.config.get('data.val_fraction', DEFAULT_VAL_FRACTION))
    return split(load_dataset(name, 'train', args.data_dir), val_fraction, seed)


def parse_target(text, family):
    if text is None:
        return ('none' if family == 'fgsm' else 'next'), None
    if text in ('none', 'next', 'random', 'all'):
        return text, None
    try:
        return 'fixed', int(text)
    except ValueError:
        raise ConfigError(f"bad --target {text!r}; expected a class index, none, next, random or all")


def parse_eps_grid(text):
    try:
        return [float(part) for part in text.split(',') if part.strip()]
    except ValueError:
        raise ConfigError(f"bad --eps-grid {text!r}")


def print_banner(title):
    print("=" * 80)
    print(title)
    print("=" * 80)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(args):
    architecture = ARCH_ALIASES.get(args.arch, args.arch)
    model_config = parse_model_options(architecture, args.model_option)
    train_config = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        seed=args.seed,
        train_limit=args.train_limit,
    )
    if args.recon_weight is not None:
        train_config.reconstruction_weight = args.recon_weight
    train_config.validate()

    out = args.out or os.path.join(args.out_dir, f'{architecture}_{args.dataset}.drcc')
    print_banner(f"Training {architecture} on {args.dataset}")
    full = load_dataset(args.dataset, 'train', args.data_dir)
    test = load_dataset(args.dataset, 'test', args.data_dir)
    parts = split(full, args.val_fraction, args.seed, test=test)

    model = build_model(model_config, seed=args.seed)
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    result = train(model, parts, train_config, metrics_path=metrics_path_for(out), progress=not args.quiet)

    accuracy = float(np.mean(result.model.predict(test.images, args.batch_size) == test.labels))
    print(f"[Train] test accuracy={accuracy:.4f}")
    logging.info("Test accuracy %.6f", accuracy)

    extra = {'data.dataset': args.dataset, 'data.seed': args.seed, 'data.val_fraction': repr(args.val_fraction)}
    save_checkpoint(out, model_to_checkpoint(result.model, train_config, extra))
    print(f"[Train] checkpoint written to {out}")
    write_manifest(os.path.dirname(os.path.abspath(out)), 'train', args)
    return 0


def cmd_calibrate(args):
    checkpoint, model = load_model(args.model)
    if not model.has_decoder:
        raise CalibrationError(f"{model.architecture} has no decoder; nothing to calibrate")
    parts = data_split(args, checkpoint)
    method = args.method.replace('-', '_')
    if method == 'train_max':
        trained_on = TrainConfig.from_config(checkpoint.config)
        source = subset(parts.train, trained_on.train_limit, seed=trained_on.seed)
    else:
        source = parts.validation
    threshold = calibrate(model, source.images, args.percentile, method, args.batch_size, progress=not args.quiet)

    validation_rate = float(flag(reconstruction_distances(model, parts.validation.images, args.batch_size),
                                 threshold).mean())
    print(f"[Calibrate] threshold={threshold.value:.6f} method={method} percentile={threshold.percentile:g} "
          f"examples={threshold.calibration_size}")
    print(f"[Calibrate] clean validation flag rate={validation_rate:.4f}")

    out = args.out or args.model
    save_checkpoint(out, store_threshold(checkpoint, threshold))
    write_manifest(os.path.dirname(os.path.abspath(out)), 'calibrate', args)
    return 0


def cmd_attack(args):
    checkpoint, model = load_model(args.model)
    name = dataset_name(args, checkpoint)
    test = subset(load_dataset(name, 'test', args.data_dir), args.limit, seed=args.seed)
    out = args.out or os.path.join(args.out_dir, f'attack_{args.family}')

    if args.attacker:
        _, attacker = load_model(args.attacker)
        print_banner(f"Black-box FGSM: {attacker.architecture} -> {model.architecture}")
        results = blackbox_transfer(attacker, model, test.images, test.labels, parse_eps_grid(args.eps_grid),
                                    args.batch_size, progress=not args.quiet)
        for epsilon, batch in results.items():
            save_adversarial_batch(batch, os.path.join(out, f'eps_{epsilon:g}'))
        write_manifest(out, 'attack', args)
        return 0

    target_mode, target_class = parse_target(args.target, args.family)
    if args.family == 'fgsm':
        spec = AttackSpec(family='fgsm', epsilon=args.eps if args.eps is not None else 0.3,
                          target_mode=target_mode, target_class=target_class, loss=args.loss)
    else:
        spec = AttackSpec.iterative(args.family, args.alpha, args.steps, target_mode, target_class,
                                    args.gamma, args.loss)
        if args.eps is not None:
            spec.epsilon = args.eps
    spec.validate()

    print_banner(f"{args.family} attack on {model.architecture} ({len(test)} images)")
    batch = run_attack(model, test.images, test.labels, spec, args.batch_size, args.seed,
                       progress=not args.quiet)
    print(f"[Attack] eps={spec.epsilon:g} steps={spec.steps} success rate={batch.flipped.mean() if len(batch) else 0.0:.4f}")
    save_adversarial_batch(batch, out)
    print(f"[Attack] adversarial batch written to {out}")
    write_manifest(out, 'attack', args)
    return 0


def cmd_detect(args):
    checkpoint, model = load_model(args.model)
    threshold = load_threshold(checkpoint)
    if threshold is None:
        raise CalibrationError(f"{args.model} holds no threshold; run calibrate first")
    batch = load_adversarial_batch(args.batch)
    batch.check_bounds(tolerance=1e-6)
    detection = report(batch, model, threshold, args.batch_size)

    out = args.out or os.path.join(args.batch, 'report.csv')
    write_report_csv(detection, out, spec=batch.spec)
    edges, clean_counts, adv_counts = distance_histogram(detection.clean_distances, detection.distances)
    histogram = args.histogram or os.path.join(os.path.dirname(os.path.abspath(out)), 'histogram.csv')
    write_histogram_csv(histogram, edges, clean_counts, adv_counts)

    summary = detection.summary()
    print_banner(f"Detection on {args.batch}")
    for key in ('examples', 'attack_success_rate', 'attack_detection_rate',
                'successful_attack_detection_rate', 'false_positive_rate'):
        print(f"[Detect] {key}={summary[key]}")
    if len(detection):
        print(f"[Detect] separation AUC={separation_auc(detection.clean_distances, detection.distances):.4f}")
    write_manifest(os.path.dirname(os.path.abspath(out)), 'detect', args)
    return 0


def cmd_eval(args):
    checkpoint, model = load_model(args.model)
    name = dataset_name(args, checkpoint)
    test = subset(load_dataset(name, 'test', args.data_dir), args.limit, seed=args.seed)
    accuracy = float(np.mean(model.predict(test.images, args.batch_size) == test.labels))
    print_banner(f"Evaluating {model.architecture} on {name}")
    print(f"[Eval] clean accuracy={accuracy:.4f}")
    if model.has_decoder and model.architecture != 'cnn_r':
        by_distance = classify_by_distance(model, test.images, batch_size=args.batch_size)
        print(f"[Eval] argmin-distance accuracy={float(np.mean(by_distance == test.labels)):.4f}")
    threshold = load_threshold(checkpoint)
    if threshold is not None:
        rate = float(flag(reconstruction_distances(model, test.images, args.batch_size), threshold).mean())
        print(f"[Eval] clean test flag rate={rate:.4f} (threshold {threshold.value:.6f})")
    write_manifest(args.out or args.out_dir, 'eval', args)
    return 0


def cmd_recon_grid(args):
    checkpoint, model = load_model(args.model)
    name = dataset_name(args, checkpoint)
    test = subset(load_dataset(name, 'test', args.data_dir), args.count, seed=args.seed)
    grid = reconstruct_all_classes(model, test.images, normalize=args.normalize)
    out = args.out or os.path.join(args.out_dir, 'recon_grid.pgm')
    write_pgm(out, grid)
    print(f"[Grid] {grid.shape[1]}x{grid.shape[0]} grid written to {out}")
    write_manifest(os.path.dirname(os.path.abspath(out)), 'recon-grid', args)
    return 0


def cmd_report(args):
    paths = list(args.inputs or [])
    if args.root:
        paths += sorted(glob.glob(os.path.join(args.root, '**', 'report.csv'), recursive=True))
    if not paths:
        raise ConfigError("no report CSVs given (use --inputs or --root)")
    rows = [curve_row(read_report_summary(path)) for path in paths]
    out = args.out or os.path.join(args.out_dir, 'curves.csv')
    write_curves_csv(rows, out)
    print(f"[Report] {len(rows)} operating points written to {out}")
    write_manifest(os.path.dirname(os.path.abspath(out)), 'report', args)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser():
    common = UsageParser(add_help=False)
    common.add_argument('--seed', type=int, default=0, help='Seed for splits, sampling and initialization')
    common.add_argument('--data-dir', default=DATA_DIR, help='Directory holding <dataset>/ IDX files')
    common.add_argument('--out-dir', default=OUT_DIR, help='Default output directory')
    common.add_argument('--batch-size', type=int, default=128, help='Examples per batch')
    common.add_argument('--quiet', action='store_true', help='Disable progress bars')

    parser = UsageParser(description='Detect adversarial images by reconstruction from class-conditional capsules')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('train', parents=[common], help='Train a model and write a checkpoint')
    p.add_argument('--arch', choices=ARCH_CHOICES, required=True)
    p.add_argument('--dataset', choices=DATASET_NAMES, required=True)
    p.add_argument('--epochs', type=int, default=20)
    p.add_argument('--lr', type=float, default=0.001)
    p.add_argument('--recon-weight', type=float, default=None, help='Reconstruction loss weight')
    p.add_argument('--train-limit', type=int, default=None, help='Train on a deterministic subset')
    p.add_argument('--val-fraction', type=float, default=DEFAULT_VAL_FRACTION)
    p.add_argument('--model-option', action='append', metavar='KEY=VALUE', help='Override a model setting')
    p.add_argument('--out', help='Checkpoint path')
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('calibrate', parents=[common], help='Calibrate the detection threshold')
    p.add_argument('--model', required=True)
    p.add_argument('--dataset', choices=DATASET_NAMES)
    p.add_argument('--percentile', type=float, default=95.0)
    p.add_argument('--method', choices=('percentile', 'train-max', 'train_max'), default='percentile')
    p.add_argument('--out', help='Checkpoint to write (default: overwrite --model)')
    p.set_defaults(handler=cmd_calibrate)

    p = sub.add_parser('attack', parents=[common], help='Craft adversarial images')
    p.add_argument('--model', required=True, help='Attacked model (defender for black-box runs)')
    p.add_argument('--family', choices=('fgsm', 'bim', 'rbim'), default='fgsm')
    p.add_argument('--eps', type=float, default=None)
    p.add_argument('--alpha', type=float, default=0.01)
    p.add_argument('--steps', type=int, default=1)
    p.add_argument('--target', default=None, help='Class index, none, next, random or all')
    p.add_argument('--gamma', type=float, default=1.0)
    p.add_argument('--loss', choices=('cross_entropy', 'margin'), default='cross_entropy')
    p.add_argument('--dataset', choices=DATASET_NAMES)
    p.add_argument('--limit', type=int, default=100, help='Attack a fixed sample of this many test images')
    p.add_argument('--attacker', help='Attacker checkpoint for black-box FGSM transfer')
    p.add_argument('--eps-grid', default=DEFAULT_EPS_GRID)
    p.add_argument('--out', help='Output directory')
    p.set_defaults(handler=cmd_attack)

    p = sub.add_parser('detect', parents=[common], help='Detection report for an adversarial batch')
    p.add_argument('--model', required=True)
    p.add_argument('--batch', required=True, help='Adversarial batch directory')
    p.add_argument('--out', help='Report CSV path')
    p.add_argument('--histogram', help='Histogram CSV path')
    p.set_defaults(handler=cmd_detect)

    p = sub.add_parser('eval', parents=[common], help='Clean accuracy and flag rate')
    p.add_argument('--model', required=True)
    p.add_argument('--dataset', choices=DATASET_NAMES)
    p.add_argument('--limit', type=int, default=None)
    p.add_argument('--out', help='Directory for the run manifest')
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser('recon-grid', parents=[common], help='Reconstructions from every class as a PGM grid')
    p.add_argument('--model', required=True)
    p.add_argument('--dataset', choices=DATASET_NAMES)
    p.add_argument('--count', type=int, default=10)
    p.add_argument('--normalize', action='store_true', help='Normalize every pose vector before decoding')
    p.add_argument('--out', help='PGM path')
    p.set_defaults(handler=cmd_recon_grid)

    p = sub.add_parser('report', parents=[common], help='Merge report CSVs into a curves CSV')
    p.add_argument('--inputs', nargs='+', help='Report CSV files')
    p.add_argument('--root', help='Collect every report.csv below this directory')
    p.add_argument('--out', help='Curves CSV path')
    p.set_defaults(handler=cmd_report)
    return parser


def main(argv=None):
    """Main application entry point"""
    args = build_parser().parse_args(argv)
    setup_logging()
    logging.info("Command %s", args.command)
    try:
        return args.handler(args)
    except DarcccError as e:
        print(f"ERROR: {e}")
        logging.error("%s failed: %s", args.command, e)
        return e.exit_code


if __name__ == '__main__':
    sys.exit(main())
