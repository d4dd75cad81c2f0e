import pathlib

import numpy as np
import pandas as pd
import pytest

from metafit import EffectSizeTable

DATA_DIR = pathlib.Path(__file__).parent / "data"


def make_table(y, v, cluster=None, **moderators):
    """EffectSizeTable with the id/study/g columns the model formulas use."""
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    n = len(y)
    ids = [str(i + 1) for i in range(n)]
    cluster = ids if cluster is None else [str(c) for c in cluster]
    mods = {
        "id": np.array(ids, dtype=object),
        "obs": np.array(ids, dtype=object),
        "study": np.array(cluster, dtype=object),
        "g": np.array(["1"] * n, dtype=object),
    }
    mods.update(moderators)
    return EffectSizeTable(ids, cluster, y, v, mods)


@pytest.fixture(scope="session")
def assink8_path():
    return DATA_DIR / "assink2016_head8.csv"


@pytest.fixture(scope="session")
def bcg_wide():
    return pd.read_csv(DATA_DIR / "bcg_colditz1994.csv")


@pytest.fixture(scope="session")
def bcg_long(bcg_wide):
    """Long-format BCG data: one row per study x arm, log odds outcome."""
    tp, tn = bcg_wide["tpos"].to_numpy(float), bcg_wide["tneg"].to_numpy(float)
    cp, cn = bcg_wide["cpos"].to_numpy(float), bcg_wide["cneg"].to_numpy(float)
    k = len(tp)
    y = np.concatenate([np.log(tp / tn), np.log(cp / cn)])
    v = np.concatenate([1 / tp + 1 / tn, 1 / cp + 1 / cn])
    cluster = [str(i + 1) for i in range(k)] * 2
    group = np.array(["v"] * k + ["c"] * k, dtype=object)
    return make_table(y, v, cluster=cluster, group=group)
