import logging
import os
from dataclasses import asdict, dataclass, field, fields
from logging import handlers
from os import path

import yaml

from dyngame.harness import PerturbationSpec
from dyngame.mpc import MpcConfig
from dyngame.solver import SolverOptions

logger = logging.getLogger(__name__)

CONFIG_FILE = 'dyngame.yml'
LOG_FILE = 'dyngame.log'

SECTIONS = {
    'solver': SolverOptions,
    'mpc': MpcConfig,
    'perturbation': PerturbationSpec,
}
NASH_DEFAULTS = {
    'n_directions': 100,
    'step_sizes': (1e-3, 1e-2),
    'epsilon': 1e-6,
}
# seeds only ever come from the command line
SEED_FIELD = 'rng_seed'


class OverrideError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


def _plain(value):
    return list(value) if isinstance(value, tuple) else value


def _section_defaults(section):
    if section == 'nash':
        return dict(NASH_DEFAULTS)
    return {k: v for k, v in asdict(SECTIONS[section]()).items() if k != SEED_FIELD}


def default_config():
    doc = {'debugLogging': False, 'plot': False}
    for section in list(SECTIONS) + ['nash']:
        doc[section] = {k: _plain(v) for k, v in _section_defaults(section).items()}
    return doc


def _coerce(key, raw, default):
    """
    Converts a command line value to the type of the default it replaces.
    """
    try:
        if isinstance(default, bool):
            lowered = raw.strip().lower()
            if lowered in ('true', 'yes', '1'):
                return True
            if lowered in ('false', 'no', '0'):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, (tuple, list)):
            return tuple(float(v) for v in raw.split(','))
        return str(raw)
    except ValueError:
        raise OverrideError(key, f"cannot convert {raw!r} to {type(default).__name__}")


def parse_override(text):
    """
    :param text: KEY=VALUE where KEY is a field name or section.field.
    :return: (key, raw value).
    """
    key, sep, value = text.partition('=')
    if not sep or not key.strip():
        raise OverrideError(text, "expected KEY=VALUE")
    return key.strip(), value.strip()


def _resolve(key, defaults):
    """
    :return: the (section, field) an override key addresses.
    """
    if key.split('.')[-1] == SEED_FIELD:
        raise OverrideError(key, "seeds are set with --seed")
    if '.' in key:
        section, _, name = key.partition('.')
        if section not in defaults or name not in defaults[section]:
            raise OverrideError(key, "unknown key")
        return section, name
    matches = [s for s, d in defaults.items() if key in d]
    if not matches:
        raise OverrideError(key, "unknown key")
    if len(matches) > 1:
        raise OverrideError(key, f"ambiguous, qualify it with one of {matches}")
    return matches[0], key


@dataclass
class Settings:
    solver: SolverOptions = field(default_factory=SolverOptions)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    perturbation: PerturbationSpec = field(default_factory=PerturbationSpec)
    nash: dict = field(default_factory=lambda: dict(NASH_DEFAULTS))
    plot: bool = False


class Config:
    def __init__(self, config_home=None):
        self.__config_home = config_home
        self.config = self.__load_config()

    def is_debug_logging(self):
        """
        :return: if debug logging mode is on, defaults to False.
        """
        return self.config.get('debugLogging', False)

    @property
    def plot(self):
        return bool(self.config.get('plot', False))

    def __load_config(self):
        """
        loads configuration from the config home, writing the defaults there if there is nothing to load.
        :return: the config.
        """
        config_path = path.join(self.config_path, CONFIG_FILE)
        if os.path.exists(config_path):
            logger.info(f"Loading config from {config_path}")
            with open(config_path, 'r') as yml:
                return yaml.load(yml, Loader=yaml.FullLoader) or {}
        config = default_config()
        self.__store_config(config, config_path)
        return config

    def __store_config(self, config, config_path):
        """
        Writes the config to the configPath.
        :param config a dict of config.
        :param config_path the path to the file to write to, intermediate dirs will be created as necessary.
        """
        logger.info(f"Writing to {config_path}")
        os.makedirs(os.path.dirname(config_path), exist_ok=True)
        with (open(config_path, 'w')) as yml:
            yaml.dump(config, yml, default_flow_style=False)

    @property
    def config_path(self):
        """
        :return: the config home, ~/.dyngame unless one was supplied.
        """
        if self.__config_home is not None:
            return self.__config_home
        return path.join(path.expanduser("~"), '.dyngame')

    def configure_logger(self, debug=False):
        """
        Configures the python logging system to log to a debug file and to stderr for warn and above.
        :param debug: forces debug logging on.
        :return: the base logger.
        """
        base_log_level = logging.DEBUG if debug or self.is_debug_logging() else logging.INFO
        # root logger
        logger = logging.getLogger('dyngame')
        logger.setLevel(base_log_level)
        for existing in list(logger.handlers):
            logger.removeHandler(existing)
            existing.close()
        # file handler
        os.makedirs(self.config_path, exist_ok=True)
        fh = handlers.RotatingFileHandler(path.join(self.config_path, LOG_FILE),
                                          maxBytes=10 * 1024 * 1024, backupCount=10)
        fh.setLevel(base_log_level)
        # create console handler with a higher log level
        ch = logging.StreamHandler()
        ch.setLevel(logging.WARN)
        # create formatter and add it to the handlers
        formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(funcName)s - %(message)s')
        fh.setFormatter(formatter)
        ch.setFormatter(formatter)
        # add the handlers to the logger
        logger.addHandler(fh)
        logger.addHandler(ch)
        return logger

    def settings(self, overrides=(), seed=0):
        """
        Builds the run settings, dataclass defaults overlaid by the config file and then by the overrides.
        :param overrides: KEY=VALUE strings.
        :param seed: the seed for every random stream.
        :return: the Settings.
        """
        defaults = {s: _section_defaults(s) for s in list(SECTIONS) + ['nash']}
        values = {s: {} for s in defaults}
        for section in defaults:
            loaded = self.config.get(section) or {}
            if not isinstance(loaded, dict):
                raise OverrideError(section, "expected a mapping in the config file")
            for name, value in loaded.items():
                _resolve(f"{section}.{name}", defaults)
                values[section][name] = value
        for text in overrides:
            key, raw = parse_override(text)
            section, name = _resolve(key, defaults)
            values[section][name] = _coerce(key, raw, defaults[section][name])
            logger.debug(f"Override {section}.{name} = {values[section][name]!r}")
        built = {}
        for section, cls in SECTIONS.items():
            kwargs = dict(values[section])
            if SEED_FIELD in {f.name for f in fields(cls)}:
                kwargs[SEED_FIELD] = seed
            built[section] = cls(**kwargs)
        nash = {**NASH_DEFAULTS, **values['nash']}
        nash['step_sizes'] = tuple(float(h) for h in nash['step_sizes'])
        return Settings(nash=nash, plot=self.plot, **built)
