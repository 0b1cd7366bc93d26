"""
CLI utilities for common operations across commands.
"""
import os
import math
import logging
import functools
from typing import Any, Dict

import click

from utils import DynreachError

logger = logging.getLogger(__name__)

# style name -> (click.style options, write to stderr)
STYLES: Dict[str, tuple] = {
    "success": ({"fg": "green"}, False),
    "error": ({"fg": "red"}, True),
    "warning": ({"fg": "yellow"}, False),
    "info": ({"fg": "blue"}, False),
    "header": ({"bold": True}, False),
    "pass": ({"fg": "green", "bold": True}, False),
    "fail": ({"fg": "red", "bold": True}, True),
}


def echo_styled(message: str, style: str = "default", **kwargs) -> None:
    """Prints a message in one of the named STYLES; unknown styles print plain."""
    options, to_stderr = STYLES.get(style, ({}, False))
    click.echo(click.style(message, **{**options, **kwargs}) if options or kwargs else message, err=to_stderr)


def abort_on_error(func):
    """Turns package errors raised inside a command into a styled message and a non-zero exit."""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except DynreachError as e:
            echo_styled(str(e), "error")
            raise click.Abort() from e
    return wrapper


def prepare_output_dir(output_dir: str) -> str:
    """Creates the run output directory (parents included) and returns its absolute path.

    Raises:
        DynreachError: If the path exists as a file or cannot be created.
    """
    path = os.path.abspath(output_dir)
    if os.path.isdir(path):
        logger.debug("Writing into existing directory %s", path)
        return path
    try:
        os.makedirs(path)
    except OSError as e:
        raise DynreachError(f"Cannot create output directory '{output_dir}': {e}") from e
    echo_styled(f"Created output directory: {path}", "info")
    return path


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return "n/a" if math.isnan(value) else f"{value:.3f}"
    return str(value)


def echo_summary(summary: Dict[str, Any], keys) -> None:
    """Prints selected summary entries, one per line."""
    for key in keys:
        if key in summary:
            echo_styled(f"  {key}: {_fmt(summary[key])}")
