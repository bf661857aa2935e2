import numpy as np
import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
from matplotlib.ticker import FormatStrFormatter


def plot_training_curves(metrics, fileName='training.png', compare=None, labels=None):
    """
    training loss in bits per character against iteration

    Keyword arguments:
    metrics -- dict of columns as returned by trainer.read_metrics
    fileName -- output image, format from the extension
    compare -- optional second run drawn on the same axes
    labels -- legend entries for metrics and compare
    """
    thisDpi = 96.
    matplotlib.rcParams.update({'font.size': 8})
    fig = plt.figure(figsize=(600./thisDpi, 400./thisDpi), dpi=thisDpi)
    axis = fig.add_subplot(111)
    runs = [metrics] if compare is None else [metrics, compare]
    labels = labels or ['run', 'compare']
    for run, label in zip(runs, labels):
        applied = run['skipped'] == 0
        axis.plot(run['iter'][applied], run['bpc'][applied], linewidth=0.8, label=label)
        validated = np.isfinite(run['val_bpc'])
        if validated.any():
            axis.plot(run['iter'][validated], run['val_bpc'][validated], 'o',
                    markersize=3, label=label + ' validation')
    axis.yaxis.set_major_formatter(FormatStrFormatter('%.2f'))
    axis.set_xlabel('iteration')
    axis.set_ylabel('bits per character')
    axis.legend(loc='upper right')
    plt.savefig(fileName, dpi=thisDpi)
    plt.close()


def plot_speedup(rows, fileName='speedup.png'):
    """
    measured speedup per configuration against the ideal linear speedup
    """
    thisDpi = 96.
    matplotlib.rcParams.update({'font.size': 8})
    fig = plt.figure(figsize=(400./thisDpi, 400./thisDpi), dpi=thisDpi)
    axis = fig.add_subplot(111)
    configurations = []
    for row in rows:
        if row.label not in configurations:
            configurations.append(row.label)
    largest = 1
    for label in configurations:
        selected = sorted([row for row in rows if row.label == label], key=lambda r: r.n_gpus)
        gpus = [row.n_gpus for row in selected]
        largest = max(largest, max(gpus))
        axis.plot(gpus, [row.speedup for row in selected], 'o-', markersize=3,
                label=label or 'measured')
    axis.plot([1, largest], [1, largest], 'k--', linewidth=0.6, label='linear')
    axis.set_xscale('log', base=2)
    axis.set_yscale('log', base=2)
    axis.set_xlabel('GPUs')
    axis.set_ylabel('speedup')
    axis.legend(loc='upper left')
    plt.savefig(fileName, dpi=thisDpi)
    plt.close()
