#!/usr/bin/env python

import argparse
import logging
import os

loggerFormat = '%(asctime)-15s %(filename)s  %(message)s'
logging.basicConfig(format = loggerFormat, level=logging.WARNING)
logger = logging.getLogger()

from charscale.config import RunConfig
from charscale.data import load_corpus, split_corpus
from charscale.errors import TrainingDivergedError
from charscale.trainer import train
from charscale.utilities import format_table


def sweep(config, batches, rules, trainRecords, valRecords, outputDir):
    """
    short runs for every (batch, rule) pair, recording the final training
    bpc or the iteration at which the run diverged
    """
    rows = []
    for batch in batches:
        for rule in rules:
            prefix = os.path.join(outputDir, 'b{}_{}'.format(batch, rule))
            runConfig = RunConfig.from_pairs([('batch_size', str(batch)), ('lr_rule', rule),
                ('checkpoint_path', prefix + '.mlmf'),
                ('metrics_path', prefix + '.csv')], config).validate()
            try:
                trainer = train(runConfig, trainRecords, valRecords)
            except TrainingDivergedError as error:
                logger.info('batch {} {} diverged at {}'.format(batch, rule, error.iteration))
                rows.append([batch, rule, 'diverged', error.iteration])
                continue
            last = trainer.history[-1]
            rows.append([batch, rule, '{:.4f}'.format(last['bpc']), last['iter']])
    return rows


def parseOptions(parser):
    parser.add_argument('--corpus', nargs=1, metavar='file', required=True)
    parser.add_argument('--config', nargs=1, metavar='file', help='key=value config file')
    parser.add_argument('--batches', nargs='+', metavar='B', default=['32', '128', '512'])
    parser.add_argument('--rules', nargs='+', choices=['none', 'linear', 'sqrt'],
            default=['linear', 'sqrt'])
    parser.add_argument('--output', nargs=1, metavar='dir', default=['.'])
    parser.add_argument("-v", "--verbose", help="increase output verbosity", action="store_true")

    args = parser.parse_args()
    if args.verbose:
        logger.setLevel(logging.INFO)

    config = RunConfig.from_file(args.config[0]) if args.config else RunConfig()
    outputDir = args.output[0]
    if not os.path.isdir(outputDir):
        os.makedirs(outputDir)
    corpus = load_corpus(args.corpus[0], config.data_format, config.seed)
    trainRecords, valRecords, _ = split_corpus(corpus)
    rows = sweep(config, [int(batch) for batch in args.batches], args.rules,
            trainRecords, valRecords, outputDir)
    print(format_table(['batch', 'rule', 'final bpc', 'iteration'], rows))


def main():
    parser = argparse.ArgumentParser(
            description='compare linear and square root learning rate scaling')
    parseOptions(parser)

if __name__ == "__main__":
    main()
