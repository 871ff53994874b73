import logging
import time
from collections.abc import Generator
from contextlib import contextmanager

logger = logging.getLogger("counterfactual_recsys")


class _LevelDependentFormatter(logging.Formatter):
    """Progress (INFO) prints bare; debug lines carry the milliseconds since start-up; the rest names the level."""

    def __init__(self) -> None:
        super().__init__()
        self._formatters = {
            logging.DEBUG: logging.Formatter("[+%(relativeCreated).0fms] %(message)s"),
            logging.INFO: logging.Formatter("%(message)s"),
        }
        self._fallback = logging.Formatter("%(name)s [%(levelname)s] %(message)s")

    def format(self, record: logging.LogRecord) -> str:
        return self._formatters.get(record.levelno, self._fallback).format(record)


def _init_logger() -> None:
    logger.setLevel(logging.INFO)
    handler = logging.StreamHandler()
    handler.setLevel(logging.INFO)
    handler.setFormatter(_LevelDependentFormatter())
    logger.addHandler(handler)
    logger.propagate = False


_init_logger()


def reset_logger() -> None:
    """Drop the package handler and let records propagate to the root logger, for applications and tests
    that configure logging themselves.
    """
    logger.propagate = True
    logger.setLevel(logging.NOTSET)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)


def set_verbosity(verbose: int) -> None:
    level = logging.DEBUG if verbose > 0 else logging.INFO
    logger.setLevel(level)
    for handler in logger.handlers:
        handler.setLevel(level)


@contextmanager
def timed(label: str) -> Generator[None, None, None]:
    start = time.perf_counter()
    yield
    logger.info("%s finished in %.1fs", label, time.perf_counter() - start)
