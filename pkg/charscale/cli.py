#!/usr/bin/env python

import argparse
import logging
import sys

from charscale import __version__
from charscale.checkpoint import load_checkpoint
from charscale.config import RunConfig
from charscale.data import load_corpus, split_corpus
from charscale.ddp import read_timings, speedup_report, write_speedup_report
from charscale.errors import (ConfigError, InsufficientDataError, CheckpointError,
        TrainingDivergedError, ReportError)
from charscale.evaluation import (evaluate, load_labeled, transfer,
        write_accuracy_report)
from charscale.model import MlstmConfig, parameter_count, parameter_bytes
from charscale.optimizer import lr_table
from charscale.trainer import train, read_metrics
from charscale.utilities import env_log_level, human_bytes, format_table

loggerFormat = '%(asctime)-15s %(filename)s  %(message)s'
logger = logging.getLogger()

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, '{}: error: {}\n'.format(self.prog, message))


def load_config(args):
    config = RunConfig()
    if getattr(args, 'config', None):
        config = RunConfig.from_file(args.config[0])
    overrides = [(key, getattr(args, key)) for key in RunConfig.keys()
                 if getattr(args, key, None) is not None]
    return RunConfig.from_pairs(overrides, config).validate()


def run_train(args):
    checkpoint = load_checkpoint(args.resume[0]) if args.resume else None
    config = load_config(args) if checkpoint is None else checkpoint.config
    if checkpoint is not None:
        logger.info('resuming from iteration {}'.format(checkpoint.iteration))
    model = MlstmConfig(config.hidden_dim, config.embed_dim, config.seq_len)
    logger.info('{} parameters, {} in {} storage'.format(parameter_count(model),
        human_bytes(parameter_bytes(model, config.precision)), config.precision))
    corpus = load_corpus(config.train_path, config.data_format, config.seed)
    train_records, val_records, _ = split_corpus(corpus)
    until = int(args.until[0]) if args.until else None
    trainer = train(config, train_records, val_records, checkpoint, until)
    last = trainer.history[-1] if trainer.history else None
    if last is not None:
        print('iteration {} loss {:.4f} nats, {:.4f} bpc'.format(last['iter'],
            last['loss_nats'], last['bpc']))
    return EXIT_OK


def held_out_records(args, config):
    if args.test:
        return load_corpus(args.test[0], config.data_format).records
    return split_corpus(load_corpus(config.train_path, config.data_format, config.seed))[2]


def run_eval(args):
    checkpoint = load_checkpoint(args.checkpoint[0])
    config = checkpoint.config
    report = evaluate(checkpoint.params, held_out_records(args, config),
            batch_size=int(args.batch_size[0]), seq_len=config.seq_len,
            seed=config.data_seed)
    print('mean bpc {:.4f} over {} shards, {} tokens'.format(report.mean_bpc,
        len(report.shard_bpc), report.tokens))
    return EXIT_OK


def run_transfer(args):
    checkpoint = load_checkpoint(args.checkpoint[0])
    l2 = float(args.l2[0]) if args.l2 else None
    feature = args.feature[0] if args.feature else checkpoint.config.feature
    train_set = load_labeled(args.train[0])
    test_set = load_labeled(args.test[0])
    row = transfer(checkpoint.params, train_set, test_set, l2, feature,
            name=args.name[0] if args.name else args.test[0])
    if args.report:
        write_accuracy_report(args.report[0], [row])
    print('test accuracy {:.4f} (l2 {:g})'.format(row['test_accuracy'], row['l2']))
    return EXIT_OK


def run_speedup_report(args):
    rows = speedup_report(read_timings(args.timings[0]))
    print(format_table(['label', 'gpus', 's/iter', 'speedup', 'efficiency'],
        [[row.label, row.n_gpus, '{:.4g}'.format(row.seconds_per_iter),
          '{:.1f}'.format(row.speedup), '{:.3f}'.format(row.efficiency)] for row in rows]))
    if args.output:
        write_speedup_report(args.output[0], rows)
    if args.plot:
        from charscale.plot import plot_speedup
        plot_speedup(rows, args.plot[0])
    return EXIT_OK


def run_lr_table(args):
    batches = [int(batch) for batch in args.batches]
    rows = lr_table(float(args.base_lr[0]), batches, args.rules)
    print(format_table(['batch', 'rule', 'lr'],
        [[batch, rule, '{:.3g}'.format(lr)] for batch, rule, lr in rows]))
    return EXIT_OK


def run_plot(args):
    from charscale.plot import plot_training_curves
    compare = read_metrics(args.compare[0]) if args.compare else None
    labels = [args.metrics[0], args.compare[0] if args.compare else '']
    plot_training_curves(read_metrics(args.metrics[0]), args.output[0], compare, labels)
    return EXIT_OK


def make_parser():
    parser = ArgumentParser(prog='charscale',
            description='mixed precision character language model training')
    parser.add_argument("-v", "--verbose", help="increase output verbosity", action="store_true")
    parser.add_argument("--version", action="version", version=__version__)
    commands = parser.add_subparsers(dest='command', metavar='command')
    commands.required = True

    trainParser = commands.add_parser('train', help='train a model')
    trainParser.add_argument('--config', nargs=1, metavar='file', help='key=value config file')
    trainParser.add_argument('--resume', nargs=1, metavar='checkpoint',
            help='continue from a checkpoint, its config is used')
    trainParser.add_argument('--until', nargs=1, metavar='iter',
            help='stop after this iteration and write the checkpoint')
    types = RunConfig.field_types()
    for key in RunConfig.keys():
        trainParser.add_argument('--' + key, metavar=getattr(types[key], '__name__', 'value'),
                help='override config key ' + key)
    trainParser.set_defaults(handler=run_train)

    evalParser = commands.add_parser('eval', help='bits per character on held out shards')
    evalParser.add_argument('--checkpoint', nargs=1, metavar='file', required=True)
    evalParser.add_argument('--test', nargs=1, metavar='file',
            help='test records, the test split of the training corpus by default')
    evalParser.add_argument('--batch_size', nargs=1, metavar='B', default=['16'],
            help='number of eval shards')
    evalParser.set_defaults(handler=run_eval)

    transferParser = commands.add_parser('transfer', help='sentiment transfer with frozen features')
    transferParser.add_argument('--checkpoint', nargs=1, metavar='file', required=True)
    transferParser.add_argument('--train', nargs=1, metavar='tsv', required=True)
    transferParser.add_argument('--test', nargs=1, metavar='tsv', required=True)
    transferParser.add_argument('--l2', nargs=1, metavar='strength',
            help='regularization, selected on a validation fold when omitted')
    transferParser.add_argument('--feature', nargs=1, choices=['cell', 'hidden'])
    transferParser.add_argument('--name', nargs=1, metavar='dataset')
    transferParser.add_argument('--report', nargs=1, metavar='csv')
    transferParser.set_defaults(handler=run_transfer)

    speedupParser = commands.add_parser('speedup-report', help='speedup and efficiency table')
    speedupParser.add_argument('--timings', nargs=1, metavar='csv', required=True,
            help='columns n_gpus,seconds_per_iter,label')
    speedupParser.add_argument('--output', nargs=1, metavar='csv')
    speedupParser.add_argument('--plot', nargs=1, metavar='file')
    speedupParser.set_defaults(handler=run_speedup_report)

    lrParser = commands.add_parser('lr-table', help='scaled initial learning rates')
    lrParser.add_argument('--base_lr', nargs=1, metavar='lr', default=['5e-4'])
    lrParser.add_argument('--batches', nargs='+', metavar='B', default=['128', '2048', '32768'])
    lrParser.add_argument('--rules', nargs='+', choices=['none', 'linear', 'sqrt'],
            default=['linear', 'sqrt'])
    lrParser.set_defaults(handler=run_lr_table)

    plotParser = commands.add_parser('plot', help='training curve from a metrics log')
    plotParser.add_argument('--metrics', nargs=1, metavar='csv', required=True)
    plotParser.add_argument('--compare', nargs=1, metavar='csv')
    plotParser.add_argument('--output', nargs=1, metavar='file', default=['training.png'])
    plotParser.set_defaults(handler=run_plot)
    return parser


def main(argv=None):
    logging.basicConfig(format=loggerFormat, level=env_log_level())
    args = make_parser().parse_args(argv)
    if args.verbose and logger.level > logging.INFO:
        logger.setLevel(logging.INFO)
    try:
        return args.handler(args)
    except ConfigError as error:
        logger.error('configuration error: {}'.format(error))
        return EXIT_USAGE
    except TrainingDivergedError as error:
        logger.error(str(error))
        return EXIT_DIVERGED
    except (InsufficientDataError, CheckpointError, ReportError, IOError) as error:
        logger.error('data error: {}'.format(error))
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
