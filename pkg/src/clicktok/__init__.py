"""Click-train acoustic tokens: codec, masked token model, translation, evaluation."""

__all__ = []

rootname = "clicktok"

import inspect
import sys
from pathlib import Path


def abspath(path) -> Path:
    return Path(path).expanduser().resolve()


def relpath(path, parent=None):
    """path relative to parent (the working directory) when it lies below it"""
    path = Path(path)
    parent = Path.cwd() if parent is None else Path(parent)
    try:
        return path.relative_to(parent)
    except ValueError:
        return path


rootdir = abspath(inspect.getfile(__import__(rootname))).parent

with open(rootdir / 'VERSION') as f:
    __version__ = f.readline().strip()

# python -i or a notebook: keep the run log quiet
interactive = hasattr(sys, 'ps1')


# -------------------------------------------------------------


import time


def timestamp() -> float:
    return time.perf_counter()


# -------------------------------------------------------------


import logging
import logging.handlers


class FormatterIcon(logging.Formatter):
    """Formatter whose '%(icon)s' field shows the record level as an icon."""

    icons = {
        logging.DEBUG: '🐛',
        logging.INFO: 'ℹ️',
        logging.WARNING: '⚠️',
        logging.ERROR: '❗',
        logging.CRITICAL: '🚨',
    }

    def __init__(self, fmt, datefmt=None):
        super().__init__(fmt.replace('%(icon)s', ''), datefmt)
        self.by_level = {
            level: logging.Formatter(fmt.replace('%(icon)s', icon), datefmt)
            for level, icon in self.icons.items()
        }

    def format(self, record):
        f = self.by_level.get(record.levelno)
        return super().format(record) if f is None else f.format(record)


formatter_simple = FormatterIcon('%(icon)s%(levelname)s: %(message)s')
formatter_detailed = FormatterIcon(
    fmt='%(asctime)s.%(msecs)03d [%(levelname)s] %(threadName)s: %(icon)s %(message)s',
    datefmt="%Y-%m-%d %H:%M:%S",
)

screen = logging.StreamHandler()
screen.setFormatter(formatter_simple)
screen.setLevel(logging.NOTSET)

logfile = None  # attached per run, see add_logfile()

logger = logging.getLogger(rootname)
logger.setLevel(logging.INFO)  # INFO, DEBUG for -v, NOTSET for -vv
logger.addHandler(screen)


def add_logfile(directory):
    """Write a detailed log next to the artifacts of a run."""
    global logfile
    if logfile is not None:
        logger.removeHandler(logfile)
        logfile.close()
    path = abspath(directory) / f"{rootname}.log"
    path.parent.mkdir(parents=True, exist_ok=True)
    logfile = logging.handlers.WatchedFileHandler(path, delay=True)
    logfile.setFormatter(formatter_detailed)
    logfile.setLevel(logging.CRITICAL + 1 if interactive else logging.NOTSET)
    logger.addHandler(logfile)
    return logfile


def set_verbosity(verbose: int = 0):
    logger.setLevel(
        {0: logging.INFO, 1: logging.DEBUG}.get(verbose, logging.NOTSET)
    )


# -------------------------------------------------------------


class ClicktokError(RuntimeError):
    exit_code = 1


class ConfigError(ClicktokError):
    exit_code = 1


class DataError(ClicktokError, ValueError):
    exit_code = 2


class WavFormatError(DataError):
    pass


class DegenerateSignalError(DataError):
    pass


class MaskedGridError(DataError):
    pass


class GeometryError(DataError):
    pass


class NumericalError(ClicktokError, ArithmeticError):
    exit_code = 3


# -------------------------------------------------------------


import re
import threading
import traceback
from textwrap import indent

_package_file = re.compile(rf'File "[^"]*/{rootname}(?=/)')


def format_exception(e, s, tb) -> list:
    """Traceback lines with package paths shortened to {clicktok.rootdir}.

    At INFO frames inside the package are left out, at DEBUG only those of
    this file, at NOTSET none.
    """
    if e is None:
        return []
    lines = traceback.format_exception(e, s, tb)
    lines = lines[:1] + traceback.format_stack()[:-1] + lines[1:]

    hidden = [r'File "<.*>",']
    if logger.level >= logging.INFO:
        hidden.append(_package_file.pattern)
    elif logger.level > logging.NOTSET:
        hidden.append(_package_file.pattern + '/__init__.py')
    hide = re.compile('|'.join(hidden))

    kept = [
        _package_file.sub(f'File "{{{rootname}.rootdir}}', line)
        for line in lines
        if logger.level == logging.NOTSET or not hide.search(line)
    ]
    if kept:
        kept[-1] = kept[-1].rstrip()
    return kept


def excepthook(e, s, tb, msg='uncaught exception', say=logger.error):
    say(f"{msg}\n{indent(''.join(format_exception(e, s, tb)), '  ')}")
    if logfile is not None and screen.level > logging.CRITICAL:
        print(f"see {relpath(logfile.baseFilename)}")


def thread_excepthook(t):
    if t.exc_type is not SystemExit:
        excepthook(
            t.exc_type,
            t.exc_value,
            t.exc_traceback,
            msg=f"uncaught exception in {t.thread}",
        )


sys.excepthook = excepthook
threading.excepthook = thread_excepthook


# -------------------------------------------------------------


def ERROR(
    msg: str = 'no message specified',
    exception=DataError,
    exit=False,
    say=logger.error,
):
    """Log msg, then raise exception(msg), or SystemExit with its exit code."""
    e, s, tb = sys.exc_info()
    if e is not None:
        # the error being handled goes to the debug log
        excepthook(e, s, tb, msg=f"while handling: {msg}", say=logger.debug)
    say(msg)
    if exit:
        raise SystemExit(getattr(exception, 'exit_code', 1))
    raise exception(msg)


def WARNING(msg: str = 'no message specified'):
    logger.warning(msg)


# -------------------------------------------------------------


from . import func  # noqa: F401
from .supported_formats import available


def _fileclass(name: str):
    """handler class registered for a format name or suffix"""
    key = name.strip().lower()
    info = available.get(f'.{key}') or available.get(key)
    if info is None:
        ERROR(f"file format '{name}' is not supported", ConfigError)
    module, cls, _ = info
    return getattr(__import__(f'{rootname}.{module}', fromlist=[cls]), cls)


def read(f, filetype=None, **kwargs):
    """read a file, the format comes from its suffix unless filetype is given"""
    t0 = timestamp()
    obj = _fileclass(filetype or Path(f).suffix).read(f, **kwargs)
    logger.debug(f"read '{relpath(f)}' in {timestamp() - t0:.2f}s")
    return obj


def write(f, data, filetype=None, **kwargs):
    """write a file, the format comes from its suffix unless filetype is given"""
    return _fileclass(filetype or Path(f).suffix).write(f, data, **kwargs)
