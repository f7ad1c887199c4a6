import numpy as np
import pytest

from basinscope.errors import IngestionError, SplitError
from basinscope.services.data_ingest import (
    Dataset,
    FeatureSchema,
    load_breast_cancer,
    load_compas,
    load_dataset,
    standardize,
    stratified_split,
)
from tests.conftest import write_compas, write_wdbc


def test_breast_cancer_shape_and_labels(tmp_path):
    ds = load_breast_cancer(write_wdbc(tmp_path / 'bc.csv', n=60))
    assert (ds.n, ds.d) == (60, 30)
    assert ds.schema.names[0] == 'feat_0'
    # every third row is malignant
    assert ds.y.sum() == 20
    assert ds.y[0] == 1 and ds.y[1] == 0


def test_breast_cancer_row_count_follows_file(tmp_path):
    path = write_wdbc(tmp_path / 'bc.csv', n=60)
    lines = path.read_text().splitlines()
    path.write_text('\n'.join(lines[:-1]) + '\n')
    assert load_breast_cancer(path).n == 59


def test_breast_cancer_non_numeric_cell_is_cited(tmp_path):
    path = write_wdbc(tmp_path / 'bc.csv', n=20)
    lines = path.read_text().splitlines()
    cells = lines[3].split(',')
    cells[7] = 'abc'
    lines[3] = ','.join(cells)
    path.write_text('\n'.join(lines) + '\n')
    with pytest.raises(IngestionError) as exc:
        load_breast_cancer(path)
    assert "line 4" in str(exc.value)
    assert "feat_5" in str(exc.value)


def test_breast_cancer_wrong_column_count(tmp_path):
    path = tmp_path / 'bc.csv'
    path.write_text('id,diagnosis,a,b\n1,M,1.0,2.0\n')
    with pytest.raises(IngestionError, match='expected 32 columns'):
        load_breast_cancer(path)


def test_breast_cancer_bad_diagnosis(tmp_path):
    path = write_wdbc(tmp_path / 'bc.csv', n=10)
    text = path.read_text().replace(',M,', ',X,', 1)
    path.write_text(text)
    with pytest.raises(IngestionError, match='diagnosis must be M or B'):
        load_breast_cancer(path)


def test_missing_file(tmp_path):
    with pytest.raises(IngestionError, match='file not found'):
        load_dataset('breast_cancer', tmp_path / 'nope.csv')


def test_compas_charge_degree_filter(tmp_path):
    rows = [{'c_charge_degree': d} for d in ('F', 'M', 'O', 'F', 'M', 'O')]
    ds = load_compas(write_compas(tmp_path / 'compas.csv', rows))
    assert ds.n == 4
    charge_cols = [n for n in ds.schema.names if n.startswith('c_charge_degree=')]
    assert charge_cols == ['c_charge_degree=F', 'c_charge_degree=M']
    assert ds.notes['filters_applied'] is True
    assert ds.notes['rows_read'] == 6


def test_compas_one_hot_blocks_are_contiguous(tmp_path):
    rows = [{'race': r, 'sex': s} for r, s in (('African-American', 'Male'), ('Caucasian', 'Female'),
                                               ('Hispanic', 'Male'), ('Caucasian', 'Male'))]
    ds = load_compas(write_compas(tmp_path / 'compas.csv', rows))
    assert ds.schema.names[:2] == ('sex=Female', 'sex=Male')
    assert ds.schema.names[2] == 'age'
    race = [i for i, s in enumerate(ds.schema.source_columns) if s == 'race']
    assert race == list(range(race[0], race[0] + 3))
    # exactly one hot per categorical block
    assert np.all(ds.X[:, race].sum(axis=1) == 1.0)


def test_compas_all_rows_filtered(tmp_path):
    rows = [{'days_b_screening_arrest': 45} for _ in range(5)]
    with pytest.raises(IngestionError, match='empty dataset after filtering'):
        load_compas(write_compas(tmp_path / 'compas.csv', rows))


def test_compas_unfiltered_keeps_every_row(tmp_path):
    rows = [{'days_b_screening_arrest': 45}, {'is_recid': -1}, {'c_charge_degree': 'O'}, {}]
    ds = load_compas(write_compas(tmp_path / 'compas.csv', rows), apply_filters=False)
    assert ds.n == 4


def test_compas_missing_columns(tmp_path):
    path = tmp_path / 'compas.csv'
    path.write_text('age,sex\n30,Male\n')
    with pytest.raises(IngestionError) as exc:
        load_compas(path)
    assert 'priors_count' in str(exc.value)
    assert 'two_year_recid' in str(exc.value)


def _balanced(n_per_class=100, d=3, seed=0):
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1], n_per_class)
    return Dataset(X=rng.normal(size=(2 * n_per_class, d)), y=y,
                   schema=FeatureSchema.numeric([f'x{j}' for j in range(d)]), name='synthetic')


def test_stratified_split_exact_counts():
    ds = _balanced()
    split = stratified_split(ds, 100, 0.3)
    assert split.test_idx.size == 60
    assert ds.y[split.test_idx].sum() == 30
    assert np.intersect1d(split.train_idx, split.test_idx).size == 0
    assert split.train_idx.size + split.test_idx.size == ds.n


def test_stratified_split_is_deterministic():
    ds = _balanced()
    a = stratified_split(ds, 100, 0.3)
    b = stratified_split(ds, 100, 0.3)
    assert np.array_equal(a.test_idx, b.test_idx)
    assert np.array_equal(a.train_idx, b.train_idx)


def test_stratified_split_seed_changes_partition():
    ds = _balanced()
    a = stratified_split(ds, 100, 0.3)
    b = stratified_split(ds, 101, 0.3)
    assert not np.array_equal(a.test_idx, b.test_idx)
    assert ds.y[a.test_idx].sum() == ds.y[b.test_idx].sum()


def test_stratified_split_needs_two_per_class():
    ds = Dataset(X=np.zeros((4, 1)), y=[0, 0, 0, 1], schema=FeatureSchema.numeric(['x']), name='tiny')
    with pytest.raises(SplitError):
        stratified_split(ds, 0, 0.5)


def test_standardize_uses_train_population_std():
    X = np.array([[2.0, 7.0], [2.0, 7.0], [4.0, 7.0], [4.0, 7.0]])
    ds = Dataset(X=X, y=[0, 0, 1, 1], schema=FeatureSchema.numeric(['a', 'b']), name='tiny')
    split = stratified_split(ds, 5, 0.5)
    train, test = standardize(ds, split)
    assert np.allclose(train[:, 0], [-1.0, 1.0])
    assert np.allclose(test[:, 0], [-1.0, 1.0])
    # constant column: std floored to 1, centred to zero
    assert np.all(train[:, 1] == 0.0)
    assert split.transform(np.array([[3.0, 7.0]]))[0, 0] == 0.0


def test_identity_scaler_for_trees():
    ds = _balanced()
    split = stratified_split(ds, 100, 0.3, standardize_features=False)
    train, _ = standardize(ds, split)
    assert np.array_equal(train, ds.X[split.train_idx])


def test_compas_rows_failing_a_filter_never_change_the_result(tmp_path):
    rows = [{'race': r, 'priors_count': i, 'c_charge_degree': d}
            for i, (r, d) in enumerate((('Caucasian', 'F'), ('African-American', 'M'),
                                        ('Hispanic', 'F'), ('Caucasian', 'M')))]
    base = load_compas(write_compas(tmp_path / 'base.csv', rows))
    violations = [{'days_b_screening_arrest': 31}, {'days_b_screening_arrest': -31}, {'is_recid': -1},
                  {'c_charge_degree': 'O'}, {'score_text': 'N/A'}, {'race': 'Asian', 'c_charge_degree': 'O'}]
    for k, bad in enumerate(violations):
        grown = load_compas(write_compas(tmp_path / f'grown{k}.csv', rows + [bad]))
        assert grown.schema.names == base.schema.names
        assert np.array_equal(grown.X, base.X)
        assert np.array_equal(grown.y, base.y)


@pytest.mark.parametrize('n_neg,n_pos', [(170, 30), (7, 93), (50, 13), (33, 4), (12, 2)])
@pytest.mark.parametrize('fraction', [0.2, 0.25, 0.3])
def test_stratification_bound_on_imbalanced_classes(n_neg, n_pos, fraction):
    y = np.array([0] * n_neg + [1] * n_pos)
    ds = Dataset(X=np.arange(y.size, dtype=np.float64)[:, None], y=y,
                 schema=FeatureSchema.numeric(['x0']), name='imbalanced')
    split = stratified_split(ds, 100, fraction)
    total = split.test_idx.size
    assert total == int(np.floor(fraction * ds.n + 0.5))
    for c in (0, 1):
        share = float(np.mean(ds.y[split.test_idx] == c))
        assert abs(share - float(np.mean(ds.y == c))) <= 1.0 / total + 1e-12
