"""
Acquire runtime configuration from environment variables (etc).
"""

import logging
import logging.config
import os

import yaml

from ebdsfilter.exception import ConfigError


def logfile_path(jsonfmt=False, debug=False):
    """
    Returns the a logfileconf path following this rules:
      - conf/logging_debug_json.conf # jsonfmt=true,  debug=true
      - conf/logging_json.conf       # jsonfmt=true,  debug=false
      - conf/logging_debug.conf      # jsonfmt=false, debug=true
      - conf/logging.conf            # jsonfmt=false, debug=false
    Can be parametrized via envvars: JSONLOG=true, DEBUGLOG=true
    """
    _json = ""
    _debug = ""

    if jsonfmt or os.getenv("JSONLOG", "false").lower() == "true":
        _json = "_json"

    if debug or os.getenv("DEBUGLOG", "false").lower() == "true":
        _debug = "_debug"

    return os.path.join(EBDSFILTER_CONF_DIR, f"logging{_debug}{_json}.conf")


def setup_logging(jsonfmt=False, debug=False):
    path = logfile_path(jsonfmt=jsonfmt, debug=debug)
    if os.path.exists(path):
        logging.config.fileConfig(path, disable_existing_loggers=False)
    else:
        logging.basicConfig(level=logging.DEBUG if debug else logging.INFO)
    return path


def getenv(name, default=None, convert=str):
    """
    Fetch variables from environment and convert to given type.

    Python's `os.getenv` returns string and requires string default.
    This allows for varying types to be interpolated from the environment.
    """

    # because os.getenv requires string default.
    internal_default = "$(none)$"
    val = os.getenv(name, internal_default)

    if val == internal_default:
        return default

    if callable(convert):
        return convert(val)

    return val


def envbool(value: str):
    return value and (value.lower() in ("1", "true", "True", "yes"))


APP_ENVIRON = getenv("APP_ENV", "development")

EBDSFILTER_SOURCE_DIR = os.path.dirname(os.path.abspath(__file__))
EBDSFILTER_ROOT_DIR = os.path.abspath(os.path.join(EBDSFILTER_SOURCE_DIR, "../"))
EBDSFILTER_CONF_DIR = os.getenv(
    "EBDSFILTER_CONF_DIR", os.path.join(EBDSFILTER_ROOT_DIR, "conf/")
)
EBDSFILTER_PRESET_DIR = os.getenv(
    "EBDSFILTER_PRESET_DIR", os.path.join(EBDSFILTER_CONF_DIR, "presets/")
)
EBDSFILTER_CONF_FILE = os.getenv("EBDSFILTER_CONF_FILE", None)
EBDSFILTER_DEBUG = getenv("EBDSFILTER_DEBUG", False, envbool)
EBDS_WORKERS = getenv("EBDS_WORKERS", 1, int)

EBDSFILTER_SENTRY_URL = os.getenv("EBDSFILTER_SENTRY_URL", None)
EBDSFILTER_SENTRY_ENV = os.getenv("EBDSFILTER_SENTRY_ENV", "development")


class EbdsConfig:
    """
    Class to initialize the process settings
    """

    def __init__(self, defaults=None, confpath=None):
        self.settings = {
            "ebdsfilter": {
                "debug": EBDSFILTER_DEBUG,
                "env": APP_ENVIRON,
                "conf_dir": EBDSFILTER_CONF_DIR,
                "preset_dir": EBDSFILTER_PRESET_DIR,
                "workers": EBDS_WORKERS,
            },
            "sentry": {
                "url": EBDSFILTER_SENTRY_URL,
                "environment": EBDSFILTER_SENTRY_ENV,
            },
        }

        if defaults:
            self.load_conf(defaults)

        if confpath:
            self.load_conffile(confpath)

    @property
    def ebdsfilter(self):
        return self.settings["ebdsfilter"]

    @property
    def sentry(self):
        return self.settings["sentry"]

    @property
    def workers(self) -> int:
        return max(1, int(self.ebdsfilter["workers"] or 1))

    @property
    def preset_dir(self) -> str:
        return self.ebdsfilter["preset_dir"]

    def reload(self, confpath, inplace=False):
        if inplace:
            instance = self
            instance.load_conffile(confpath)
        else:
            instance = EbdsConfig(defaults=self.settings, confpath=confpath)
        return instance

    def load_conf(self, conf):
        for key, val in (conf or {}).items():
            if key not in self.settings:
                raise ConfigError(
                    f"unknown settings section '{key}'",
                    {"known": sorted(self.settings)},
                )
            self.settings[key].update(val or {})

    def load_conffile(self, confpath):
        try:
            with open(confpath, "r", encoding="utf-8") as conffile:
                self.load_conf(yaml.safe_load(conffile.read()))
        except yaml.YAMLError as exc:
            raise ConfigError(
                f"unreadable settings file {confpath}", {"file": confpath}
            ) from exc


GCONFIG = EbdsConfig(confpath=EBDSFILTER_CONF_FILE)
