"""Shared fixtures: memoized driver runs for the bundled experiment tasks."""

import json

import pytest

from spectral_moduli import cli


@pytest.fixture(scope="session")
def cli_task(tmp_path_factory):
    """Run a driver command once per distinct argument tuple and cache it.

    Returns ``run(*args) -> (exit_code, out_dir)``; the bundled learning and
    training tasks are expensive, so every test that needs one shares the
    same completed run.
    """
    cache: dict[tuple, tuple[int, object]] = {}

    def run(*args: str):
        key = tuple(args)
        if key not in cache:
            out = tmp_path_factory.mktemp("task")
            code = cli.main(list(args) + ["--out", str(out)])
            cache[key] = (code, out)
        return cache[key]

    return run


@pytest.fixture(scope="session")
def load_report():
    def load(out_dir, name="report.json"):
        with open(out_dir / name) as fh:
            return json.load(fh)

    return load
