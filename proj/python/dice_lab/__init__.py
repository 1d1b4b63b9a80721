"""Python front end for the DICE ensemble lab."""

import json
import os

from . import _core
from ._core import (
    FormatError,
    NumericError,
    SpecError,
    agreement,
    brier,
    clipped_ratio,
    cr_estimate,
    ece,
    entropy_diversity,
    fit_temperature,
    kohavi_wolpert_variance,
    make_spurious_clusters,
    nll,
    ood_scores,
    q_statistic,
    ratio_error,
)

SPEC_VERSION = _core.SPEC_VERSION


def resolve_spec(spec):
    """Every default filled in; accepts a dict or a path to a JSON file."""
    if isinstance(spec, (str, os.PathLike)):
        with open(spec) as f:
            spec = json.load(f)
    return json.loads(_core.resolve_spec(json.dumps(spec)))


def train(spec, seed, out_dir):
    """Runs one seed of `spec` into `out_dir` and returns the final test metrics."""
    _core.run_experiment(json.dumps(resolve_spec(spec)), seed, os.fspath(out_dir))
    return read_metrics(out_dir)[-1]["test"]


def read_metrics(run_dir):
    with open(os.path.join(run_dir, "metrics.jsonl")) as f:
        return [json.loads(line) for line in f if line.strip()]


def report(runs, out_dir, dice_w_scoring=False):
    if isinstance(runs, (str, os.PathLike)):
        runs = [runs]
    return _core.write_report([os.fspath(r) for r in runs], os.fspath(out_dir), dice_w_scoring)


def run_oracles(seed=7):
    ok, text = _core.run_oracles(seed)
    return ok, text.splitlines()
