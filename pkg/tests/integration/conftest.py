# Copyright 2021 Canonical Ltd.
# See LICENSE file for licensing details.
import functools
import logging
import time
from collections import defaultdict
from datetime import datetime
from pathlib import Path

import pytest
import yaml
from runner import echodex

logger = logging.getLogger(__name__)


class Store(defaultdict):
    def __init__(self):
        super(Store, self).__init__(Store)

    def __getattr__(self, key):
        """Override __getattr__ so dot syntax works on keys."""
        try:
            return self[key]
        except KeyError:
            raise AttributeError(key)

    def __setattr__(self, key, value):
        """Override __setattr__ so dot syntax works on keys."""
        self[key] = value


store = Store()


def timed_memoizer(func):
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        key = "/".join([func.__qualname__, *map(str, args)])
        logger.info("Started: %s" % key)
        start_time = datetime.now()
        if key in store.keys():
            ret = store[key]
        else:
            logger.info("Return for {} not cached".format(key))
            ret = func(*args, **kwargs)
            store[key] = ret
        logger.info("Finished: {} in: {} seconds".format(key, datetime.now() - start_time))
        return ret

    return wrapper


@pytest.fixture(scope="session")
def runs_dir(tmp_path_factory) -> Path:
    return tmp_path_factory.mktemp("echodex-runs")


@timed_memoizer
def run_preset_cli(preset: str, out: Path, *overrides: str) -> dict:
    """Run a preset through the CLI once per session; return its manifest, summary and wall time."""
    args = [preset, "--out", out]
    for override in overrides:
        args += ["--set", override]
    started = time.monotonic()
    echodex(*args, ok_code=(0, 1))
    return {
        "out": out,
        "seconds": time.monotonic() - started,
        "manifest": yaml.safe_load((out / "manifest.yaml").read_text()),
        "summary": yaml.safe_load((out / "summary.yaml").read_text()),
    }


@pytest.fixture(scope="module")
def preset_run(runs_dir):
    """Callable fixture: `preset_run("kloeden", "a=1.5", name="steep")`."""

    def run(preset: str, *overrides: str, name: str = "") -> dict:
        return run_preset_cli(preset, runs_dir / (name or preset), *overrides)

    return run
