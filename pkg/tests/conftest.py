import datetime as dt

import numpy as np
import pytest

from fewshot_gmm.data import HouseholdSeries, expected_header


def write_csv(path, rows, T=24):
    lines = [",".join(expected_header(T))]
    lines += [",".join(str(c) for c in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def make_series(hid, n_days, T=24, seed=0, start=dt.date(2020, 1, 1)):
    rng = np.random.default_rng(seed)
    dates = [start + dt.timedelta(days=i) for i in range(n_days)]
    return HouseholdSeries(hid, dates, rng.gamma(2.0, 0.3, size=(n_days, T)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
