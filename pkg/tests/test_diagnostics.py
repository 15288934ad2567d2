from types import SimpleNamespace

import numpy as np
import pytest

from esrf.data import holdout_split, make_synthetic
from esrf.diagnostics import attention_heatmap, ego_edges, export_diagnostics, overlap_stats
from esrf.errors import InputError
from esrf.sparse import SparseMatrix
from esrf.trainer import TrainingConfig, train

# directed ties 0->1, 0->2, 1->2, 3->0
SOCIAL = SparseMatrix.from_dense(np.array([[0, 1, 1, 0], [0, 0, 1, 0], [0, 0, 0, 0], [1, 0, 0, 0]], dtype=float))


class TestOverlap:
    def test_alternatives_equal_explicit(self):
        table = np.array([[1, 2, 3], [0, 2, -1], [0, 1, -1], [0, -1, -1]])
        stats = overlap_stats(table, SOCIAL)
        assert stats.global_percent == 100.0
        assert all(common == size for common, size in stats.per_user.values())

    def test_disjoint(self):
        table = np.array([[-1], [3], [3], [1]])
        stats = overlap_stats(table, SOCIAL)
        assert stats.global_percent == 0.0 and 0 not in stats.per_user

    def test_partial(self):
        table = np.array([[1, 2], [3, -1], [0, 1], [2, -1]])
        # hits: user 0 two, user 1 none, user 2 two, user 3 none -> 4 of 6
        assert overlap_stats(table, SOCIAL).global_percent == pytest.approx(400 / 6)


def test_ego_roles():
    table = np.array([[1, 2], [3, -1], [0, 1], [2, -1]])
    assert ego_edges(table, SOCIAL, [0, 3]) == [
        (0, 1, "overlap"), (0, 2, "overlap"), (0, 3, "explicit"), (3, 0, "explicit"), (3, 2, "alternative"),
    ]


def test_untrained_model_rejected(tmp_path):
    with pytest.raises(InputError, match="not been trained"):
        export_diagnostics(SimpleNamespace(trained=False, table=np.zeros((2, 1))), SOCIAL, tmp_path)
    with pytest.raises(InputError):
        attention_heatmap(SimpleNamespace(trained=True, table=None), [0])


def test_trained_heatmap_rows_sum_to_one(tmp_path):
    ds = make_synthetic(n_users=24, n_items=30, n_groups=3, items_per_user=6, friends_per_user=3, seed=1)
    fit, val = holdout_split(ds.feedback, 0.2, seed=0)
    cfg = TrainingConfig(dim=8, layers=2, k=4, batch_size=64, gen_batch_size=16, hidden=8, pretrain_epochs_d=1,
                         pretrain_epochs_g=1, adversarial_epochs=1, learning_rate=0.01, dtype="float64")
    model, _ = train(fit, ds.social, cfg, val)
    paths = export_diagnostics(model, ds.social.s, tmp_path, sample=5, seed=2)
    heat = np.loadtxt(paths["heatmap"], delimiter=",", skiprows=1, ndmin=2)
    assert heat.shape == (5, 5)
    np.testing.assert_allclose(heat[:, 1:].sum(axis=1), 1.0, atol=1e-6)
    roles = {line.split("\t")[2] for line in paths["ego"].read_text().splitlines()[1:]}
    assert roles <= {"explicit", "alternative", "overlap"}
