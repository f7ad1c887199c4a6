import numpy as np
import pytest

from basinscope.config.experiment import ExperimentConfig
from basinscope.services import runtime


def write_wdbc(path, n=90, seed=0):
    """Synthetic file in the WDBC layout: id, diagnosis, 30 numeric features."""
    rng = np.random.default_rng(seed)
    y = (np.arange(n) % 3 == 0).astype(int)
    X = rng.normal(size=(n, 30))
    X[:, :5] += 1.5 * y[:, None]
    X[:, 5:10] = X[:, :5] + 0.3 * rng.normal(size=(n, 5))
    header = ['id', 'diagnosis'] + [f'feat_{j}' for j in range(30)]
    lines = [','.join(header)]
    for i in range(n):
        cells = [str(900000 + i), 'M' if y[i] else 'B'] + [repr(float(v)) for v in X[i]]
        lines.append(','.join(cells))
    path.write_text('\n'.join(lines) + '\n', encoding='utf-8')
    return path


COMPAS_HEADER = ['id', 'sex', 'age', 'age_cat', 'race', 'juv_fel_count', 'juv_misd_count',
                 'juv_other_count', 'priors_count', 'c_charge_degree', 'days_b_screening_arrest',
                 'is_recid', 'score_text', 'two_year_recid']


def write_compas(path, rows):
    lines = [','.join(COMPAS_HEADER)]
    for i, row in enumerate(rows):
        base = {
            'id': i, 'sex': 'Male', 'age': 30, 'age_cat': '25 - 45', 'race': 'Caucasian',
            'juv_fel_count': 0, 'juv_misd_count': 0, 'juv_other_count': 0, 'priors_count': 1,
            'c_charge_degree': 'F', 'days_b_screening_arrest': 0, 'is_recid': 0,
            'score_text': 'Low', 'two_year_recid': i % 2,
        }
        base.update(row)
        lines.append(','.join(str(base[c]) for c in COMPAS_HEADER))
    path.write_text('\n'.join(lines) + '\n', encoding='utf-8')
    return path


@pytest.fixture(autouse=True)
def _fresh_caches():
    runtime.clear_caches()
    yield
    runtime.clear_caches()


@pytest.fixture
def wdbc_csv(tmp_path):
    return write_wdbc(tmp_path / 'breast_cancer.csv')


@pytest.fixture
def small_config(tmp_path, wdbc_csv):
    return ExperimentConfig(
        name='small',
        dataset='breast_cancer',
        data_path=wdbc_csv,
        runs=12,
        split_seeds=(100,),
        chunk_size=5,
        output_dir=tmp_path / 'out',
        k_max=4,
    )
