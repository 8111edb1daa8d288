"""Batch bookkeeping; resume and --jobs independence are covered by the acceptance suite."""
import pytest

from refinedem.batch import batch_run, expand_cells
from refinedem.io import config_hash, validate_matrix


def _matrix(seeds=(0,)):
    return validate_matrix({
        "schema_version": 1, "seeds": list(seeds),
        "base": {"experiment": "plate", "preset": "tiny"},
        "cells": [{"label": "ref", "reference": True, "bed": {"d_min": 0.01}},
                  {"label": "coarse", "bed": {"d_min": 0.013}}],
    })


def test_expand_cells_counts_and_order():
    cells = expand_cells(_matrix(seeds=(0, 1, 2)))
    assert len(cells) == 6
    assert [c["reference"] for c in cells[:3]] == [True] * 3
    assert len({config_hash(c) for c in cells}) == 6


@pytest.mark.slow
def test_failed_cell_is_recorded(tmp_path):
    m = validate_matrix({"schema_version": 1, "base": {"experiment": "plate", "preset": "tiny"},
                         "cells": [{"label": "ref", "reference": True, "bed": {"d_min": 0.01},
                                    "plate": {"normal_load": 0.0}}]})
    records, _, summary = batch_run(m, tmp_path)
    assert records[0].status == "failed" and "ExperimentFault" in records[0].error
    assert summary["incomplete"] == ["ref seed=0"]
