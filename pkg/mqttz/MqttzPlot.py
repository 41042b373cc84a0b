#!/usr/bin/env python3
# -*- coding: utf-8 -*-

import seaborn as sns
import pandas as pd
import matplotlib.pyplot as plt
import numpy as np

from mqttz.MqttzBench import PHASES, cdf_points

sns.set(style="ticks")


def _finish(fig, save):
    fig.tight_layout()
    if save is not None:
        fig.savefig(save, dpi=300, bbox_inches='tight')
    return fig


def plot_phase_breakdown(samples, save=None):
    """
    Stacked percentage of each re-encryption phase, per block size, one panel per mode.

    :param pandas.DataFrame samples: micro-benchmark samples (scenario, run, phase, block_size, value_us)
    :param str save: file name to save plot
    :returns: matplotlib figure
    """
    parts = samples[samples['phase'] != 'total']
    modes = list(pd.unique(parts['scenario']))
    fig, axes = plt.subplots(1, len(modes), figsize=(4 * len(modes), 4), sharey=True, squeeze=False)
    for ax, mode in zip(axes[0], modes):
        means = (parts[parts['scenario'] == mode]
                 .groupby(['block_size', 'phase'])['value_us'].mean().unstack('phase'))
        means = means[[p for p in PHASES[:-1] if p in means.columns]]
        pct = 100 * means.div(means.sum(axis=1), axis=0)
        pct.plot(kind='bar', stacked=True, ax=ax, legend=False, width=0.8,
                 color=sns.color_palette('colorblind', pct.shape[1]))
        ax.set_title(mode)
        ax.set_xlabel('block size (B)')
        ax.set_ylim(0, 100)
    axes[0][0].set_ylabel('% of re-encryption time')
    if len(modes):
        axes[0][-1].legend(loc='center left', bbox_to_anchor=(1, 0.5))
    return _finish(fig, save)


def plot_latency_cdf(delays, save=None):
    """
    Dissemination delay CDF per broker mode, medians marked.

    :param dict delays: mode -> array-like of delays in microseconds
    :param str save: file name to save plot
    :returns: matplotlib figure
    """
    fig, ax = plt.subplots(figsize=(6, 4))
    for mode, values in delays.items():
        x, f = cdf_points(values)
        med = x[np.searchsorted(f, 0.5)]
        ax.plot(x / 1e3, f, label='%s (p50 %.2f ms)' % (mode, med / 1e3))
        ax.axvline(med / 1e3, ls=':', lw=0.8, color=ax.lines[-1].get_color())
    ax.set_xlabel('dissemination delay (ms)')
    ax.set_ylabel('CDF')
    ax.legend()
    return _finish(fig, save)


def plot_cache_cdf(samples, save=None):
    """
    Key lookup latency CDF per cache capacity.

    :param pandas.DataFrame samples: cache samples (capacity, value_us, ...)
    :param str save: file name to save plot
    :returns: matplotlib figure
    """
    fig, ax = plt.subplots(figsize=(6, 4))
    for capacity, group in samples.groupby('capacity'):
        x, f = cdf_points(group['value_us'])
        ax.plot(x, f, label='capacity %d' % capacity)
    ax.set_xscale('log')
    ax.set_xlabel('lookup latency (us)')
    ax.set_ylabel('CDF')
    ax.legend()
    return _finish(fig, save)


def plot_scaling(medians, fit=None, save=None):
    """
    :param dict medians: subscriber count -> median delay (us)
    :param tuple fit: (slope, intercept, r2) from `fit_line`
    :param str save: file name to save plot
    :returns: matplotlib figure
    """
    counts = np.array(sorted(medians))
    y = np.array([medians[c] for c in counts]) / 1e3
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(counts, y, 'o', label='median')
    if fit is not None:
        slope, intercept, r2 = fit
        ax.plot(counts, (slope * counts + intercept) / 1e3, '-', label='fit, R$^2$=%.3f' % r2)
    ax.set_xlabel('subscribers')
    ax.set_ylabel('delay to last subscriber (ms)')
    ax.legend()
    return _finish(fig, save)


def plot_throughput_percentiles(percentiles, save=None):
    """
    Stacked percentile bands of per-publisher throughput over time.

    :param pandas.DataFrame percentiles: index second, columns min, p25, p50, p75, max (bytes)
    :param str save: file name to save plot
    :returns: matplotlib figure
    """
    fig, ax = plt.subplots(figsize=(7, 4))
    t = percentiles.index.values
    colors = sns.color_palette('Blues', 4)
    bands = [('min', 'p25'), ('p25', 'p50'), ('p50', 'p75'), ('p75', 'max')]
    for (lo, hi), c in zip(bands, colors):
        ax.fill_between(t, percentiles[lo], percentiles[hi], step='mid', color=c, label='%s-%s' % (lo, hi))
    ax.plot(t, percentiles['p50'], drawstyle='steps-mid', color='k', lw=0.8)
    ax.set_xlabel('time (s)')
    ax.set_ylabel('bytes per publisher per second')
    ax.legend(loc='upper right', fontsize='small')
    return _finish(fig, save)


def plot_cpu(cpu, save=None):
    """
    :param pandas.DataFrame cpu: broker CPU log (second, cpu_percent, monotonic)
    :param str save: file name to save plot
    :returns: matplotlib figure
    """
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.plot(cpu['second'], cpu['cpu_percent'])
    ax.set_xlabel('time (s)')
    ax.set_ylabel('broker CPU (%)')
    ax.set_ylim(bottom=0)
    return _finish(fig, save)
