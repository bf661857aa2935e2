#!/usr/bin/env python

import argparse
import logging
import os

import numpy as np

loggerFormat = '%(asctime)-15s %(filename)s  %(message)s'
logging.basicConfig(format = loggerFormat, level=logging.WARNING)
logger = logging.getLogger()

from charscale.config import RunConfig
from charscale.data import load_corpus, split_corpus
from charscale.evaluation import evaluate
from charscale.plot import plot_training_curves
from charscale.trainer import train, read_metrics


def runPrecision(config, precision, outputDir, trainRecords, valRecords, testRecords):
    """
    train one run in the given precision and score it on the test split
    """
    prefix = os.path.join(outputDir, precision)
    runConfig = RunConfig.from_pairs([('precision', precision),
        ('checkpoint_path', prefix + '.mlmf'), ('metrics_path', prefix + '.csv')], config)
    trainer = train(runConfig.validate(), trainRecords, valRecords)
    report = evaluate(trainer.group.params, testRecords, runConfig.eval_batch_size,
            runConfig.seq_len, seed=runConfig.data_seed)
    skipped = int(np.sum(read_metrics(runConfig.metrics_path)['skipped']))
    logger.info('{}: test bpc {:.4f}, {} skipped updates'.format(precision,
        report.mean_bpc, skipped))
    return runConfig.metrics_path, report.mean_bpc, skipped


def parseOptions(parser):
    parser.add_argument('--corpus', nargs=1, metavar='file', required=True,
            help='newline delimited training corpus')
    parser.add_argument('--config', nargs=1, metavar='file', help='key=value config file')
    parser.add_argument('--output', nargs=1, metavar='dir', default=['.'],
            help='directory for metrics, checkpoints and the plot')
    parser.add_argument('--tolerance', nargs=1, metavar='bpc', default=['0.02'],
            help='largest accepted test bpc gap between the two runs')
    parser.add_argument("-v", "--verbose", help="increase output verbosity", action="store_true")

    args = parser.parse_args()
    if args.verbose:
        logger.setLevel(logging.INFO)

    config = RunConfig.from_file(args.config[0]) if args.config else RunConfig()
    outputDir = args.output[0]
    if not os.path.isdir(outputDir):
        os.makedirs(outputDir)
    corpus = load_corpus(args.corpus[0], config.data_format, config.seed)
    trainRecords, valRecords, testRecords = split_corpus(corpus)

    results = {}
    for precision in ('mixed', 'fp32'):
        results[precision] = runPrecision(config, precision, outputDir,
                trainRecords, valRecords, testRecords)

    plot_training_curves(read_metrics(results['mixed'][0]),
            os.path.join(outputDir, 'precision_parity.png'),
            read_metrics(results['fp32'][0]), ['mixed', 'fp32'])
    gap = abs(results['mixed'][1] - results['fp32'][1])
    print('mixed {:.4f} bpc, fp32 {:.4f} bpc, gap {:.4f}'.format(
        results['mixed'][1], results['fp32'][1], gap))
    if gap > float(args.tolerance[0]):
        logger.warning('precision gap {:.4f} exceeds {}'.format(gap, args.tolerance[0]))


def main():
    parser = argparse.ArgumentParser(
            description='train the same model in mixed and full precision and compare')
    parseOptions(parser)

if __name__ == "__main__":
    main()
