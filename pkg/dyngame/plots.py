import io
import logging

import matplotlib

matplotlib.use('Agg')

import matplotlib.pyplot as plt
import numpy as np

from dyngame.handler import atomic_write
from dyngame.scenarios import STATE_SIZE

logger = logging.getLogger(__name__)


def _save_svg(fig, path):
    buffer = io.BytesIO()
    with plt.rc_context({'svg.hashsalt': 'dyngame'}):
        fig.savefig(buffer, format='svg', metadata={'Date': None})
    plt.close(fig)
    atomic_write(path, buffer.getvalue(), mode='wb')
    logger.info(f"Saved plot to {path}")


def plot_paths(spec, states, path, title=None):
    """
    Draws the road boundaries and each player's path with its start and goal.
    :param spec: the scenario.
    :param states: the joint states (T, 4M).
    :param path: the svg file to write.
    """
    states = np.asarray(states, dtype=float)
    fig, ax = plt.subplots(figsize=(10, 6))
    for boundary in spec.road.boundary_arrays():
        ax.plot(boundary[:, 0], boundary[:, 1], color='k', linewidth=1)
    for nu, player in enumerate(spec.players):
        px = states[:, STATE_SIZE * nu]
        py = states[:, STATE_SIZE * nu + 1]
        line, = ax.plot(px, py, marker='.', markersize=3, label=player.name)
        ax.add_patch(plt.Circle((px[-1], py[-1]), spec.radius, fill=False, color=line.get_color(), linestyle='--'))
        ax.scatter([player.goal.px], [player.goal.py], marker='x', color=line.get_color())
    ax.set_aspect('equal')
    ax.set_xlabel('x (m)')
    ax.set_ylabel('y (m)')
    ax.set_title(title or spec.name)
    ax.grid(True)
    ax.legend()
    _save_svg(fig, path)


def plot_histograms(batch, path):
    """
    Newton iteration and final violation histograms of a monte carlo batch, side by side.
    """
    fig, axes = plt.subplots(1, 2, figsize=(12, 4))
    for ax, (title, histogram) in zip(axes, (('newton iterations', batch.newton_histogram),
                                             ('max violation', batch.violation_histogram))):
        labels = list(histogram.keys())
        ax.bar(np.arange(len(labels)), list(histogram.values()))
        ax.set_xticks(np.arange(len(labels)))
        ax.set_xticklabels(labels, rotation=45)
        ax.set_title(f"{batch.scenario}: {title}")
        ax.set_ylabel('samples')
        ax.grid(True, axis='y')
    fig.tight_layout()
    _save_svg(fig, path)
