import abc
import logging

import numpy as np

from dyngame.model import dynamics_step
from dyngame.scenarios import STATE_SIZE

logger = logging.getLogger(__name__)


class StateNoise:
    """
    Provides the disturbance added to the true state after each step.
    """

    @abc.abstractmethod
    def provide(self, size):
        """
        :param size: the state dimension.
        :return: a disturbance vector.
        """
        pass


class NoNoise(StateNoise):

    def provide(self, size):
        return np.zeros(size)


class GaussianNoise(StateNoise):
    """
    Zero mean gaussian noise with a per component standard deviation, a 4 element scale is tiled across the players.
    """

    def __init__(self, scale, seed):
        self.scale = np.asarray(scale, dtype=float)
        if np.any(self.scale < 0):
            raise ValueError(f"noise scale must be non negative, was {scale}")
        self.rng = np.random.default_rng(seed)

    def provide(self, size):
        scale = self.scale
        if scale.size == STATE_SIZE and size != STATE_SIZE:
            scale = np.tile(scale, size // STATE_SIZE)
        if scale.size != size:
            raise ValueError(f"noise scale has {scale.size} entries for a state of size {size}")
        return self.rng.standard_normal(size) * scale


class Plant:
    """
    The simulated world: the true dynamics plus noise, and players that ignore the game and simply walk a straight
    line at a fixed speed.
    """

    def __init__(self, dynamics, noise=None, open_loop=None):
        """
        :param dynamics: the true joint dynamics.
        :param noise: the state noise, none if not supplied.
        :param open_loop: a dict of player index to the constant speed that player actually moves at.
        """
        self.dynamics = dynamics
        self.noise = noise if noise is not None else NoNoise()
        self.open_loop = dict(open_loop or {})

    def step(self, x, u):
        x = np.asarray(x, dtype=float)
        nxt = dynamics_step(self.dynamics, x, u)
        nxt = nxt + self.noise.provide(self.dynamics.n)
        for player, speed in self.open_loop.items():
            block = slice(STATE_SIZE * player, STATE_SIZE * (player + 1))
            px, py, theta, _ = x[block]
            dt = self.dynamics.dt
            nxt[block] = (px + speed * dt * np.cos(theta), py + speed * dt * np.sin(theta), theta, speed)
        return nxt
