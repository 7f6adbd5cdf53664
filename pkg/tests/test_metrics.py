"""Evaluation, feature extraction, the exact t-SNE, and the emitters."""

import numpy as np
import pytest

from dsfusion.data import LabeledDataset, synth_dataset
from dsfusion.metrics import (
    TsneConfig,
    emit_scatter_svg,
    evaluate,
    extract_features,
    joint_affinities,
    tsne,
    write_confusion_csv,
    write_embedding_csv,
    write_metrics_csv,
)
from dsfusion.model import FusionNet, preset_config
from dsfusion.tensor import Tensor


class _OracleModel:
    """Emits a one-hot logit row for the true class (labels supplied)."""

    def __init__(self, labels, num_classes):
        self.labels = np.asarray(labels)
        self.num_classes = num_classes
        self._cursor = 0

    def forward(self, images, training=False, return_features=False):
        n = len(images)
        rows = self.labels[self._cursor : self._cursor + n]
        self._cursor += n
        logits = np.zeros((n, self.num_classes), dtype=np.float32)
        logits[np.arange(n), rows] = 10.0
        out = Tensor(logits)
        return (out, Tensor(logits)) if return_features else out


class _ConstantModel:
    def __init__(self, num_classes, value=0.0):
        self.num_classes = num_classes
        self.value = value

    def forward(self, images, training=False, return_features=False):
        out = Tensor(np.full((len(images), self.num_classes), self.value, dtype=np.float32))
        return (out, out) if return_features else out


class _FixedLogitsModel:
    def __init__(self, logits):
        self.logits = np.asarray(logits, dtype=np.float32)
        self.num_classes = self.logits.shape[1]

    def forward(self, images, training=False, return_features=False):
        out = Tensor(self.logits[: len(images)])
        return (out, out) if return_features else out


def _dataset(labels, num_classes, hw=4):
    labels = np.asarray(labels)
    images = np.zeros((len(labels), 3, hw, hw), dtype=np.float32)
    return LabeledDataset(images, labels, [f"c{i}" for i in range(num_classes)])


class TestEvaluate:
    def test_oracle_model_is_perfect(self):
        labels = np.array([0, 1, 2, 1, 0, 2])
        ds = _dataset(labels, 3)
        report = evaluate(_OracleModel(labels, 3), ds, batch_size=4)
        assert report.accuracy == 1.0
        np.testing.assert_array_equal(report.confusion, np.diag([2, 2, 2]))
        np.testing.assert_array_equal(report.per_class_accuracy, [1.0, 1.0, 1.0])

    def test_constant_model_ties_to_class_zero(self):
        labels = np.repeat(np.arange(4), 5)
        ds = _dataset(labels, 4)
        report = evaluate(_ConstantModel(4), ds)
        assert report.accuracy == pytest.approx(0.25)
        assert report.confusion[:, 0].sum() == 20

    def test_hand_built_confusion(self):
        labels = np.array([0, 0, 1, 1])
        logits = np.array(
            [[5.0, 0.0], [5.0, 0.0], [0.0, 5.0], [9.0, 0.0]], dtype=np.float32
        )
        report = evaluate(_FixedLogitsModel(logits), _dataset(labels, 2))
        assert report.accuracy == pytest.approx(0.75)
        np.testing.assert_array_equal(report.confusion, [[2, 0], [1, 1]])
        np.testing.assert_allclose(report.per_class_accuracy, [1.0, 0.5])

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 3, 30)
        ds = _dataset(labels, 3)
        r1 = evaluate(_OracleModel(labels, 3), ds)
        perm = rng.permutation(30)
        ds2 = ds.subset(perm)
        r2 = evaluate(_OracleModel(labels[perm], 3), ds2)
        assert r1.accuracy == r2.accuracy
        assert r1.confusion.sum() == r2.confusion.sum()
        np.testing.assert_array_equal(np.sort(r1.confusion.ravel()), np.sort(r2.confusion.ravel()))

    def test_class_mismatch_rejected(self):
        ds = _dataset([0, 1], 2)
        with pytest.raises(ValueError, match="classes"):
            evaluate(_ConstantModel(5), ds)

    def test_empty_dataset_rejected(self):
        ds = _dataset(np.zeros(0, dtype=int), 2)
        with pytest.raises(ValueError, match="empty"):
            evaluate(_ConstantModel(2), ds)


class TestExtractFeatures:
    def test_width_matches_flatten_dim(self):
        cfg = preset_config("micro")
        model = FusionNet.initialise(cfg, seed=0)
        ds = synth_dataset(3, 4, 8, seed=0)
        feats = extract_features(model, ds)
        assert feats.shape == (12, cfg.flatten_dim)

    def test_duplicate_inputs_duplicate_rows(self):
        cfg = preset_config("micro")
        model = FusionNet.initialise(cfg, seed=1)
        ds = synth_dataset(3, 2, 8, seed=1, noise_std=0.0)
        feats = extract_features(model, ds)
        np.testing.assert_array_equal(feats[0], feats[1])

    def test_zero_images_zero_bias_zero_features(self):
        cfg = preset_config("micro")
        model = FusionNet.initialise(cfg, seed=2)
        for name, t in model.params.items():
            if name.endswith("bias"):
                t.data[...] = 0.0
        ds = _dataset([0, 1, 2], 3, hw=8)
        feats = extract_features(model, ds)
        np.testing.assert_allclose(feats, 0.0, atol=1e-12)


def _clusters(n_per=50, d=8, separation=50.0, seed=0):
    rng = np.random.default_rng(seed)
    centres = rng.standard_normal((3, d))
    centres = centres / np.linalg.norm(centres, axis=1, keepdims=True) * separation
    points = np.concatenate([c + rng.standard_normal((n_per, d)) for c in centres])
    labels = np.repeat(np.arange(3), n_per)
    return points, labels


class TestAffinities:
    def test_two_points_forced_half(self):
        aff = joint_affinities(np.array([[0.0, 0.0], [3.0, 4.0]]), perplexity=2.0)
        assert aff.joint[0, 1] == pytest.approx(0.5, abs=1e-9)
        assert aff.joint[1, 0] == pytest.approx(0.5, abs=1e-9)

    def test_equidistant_points_uniform_rows(self):
        # distinct rows of the identity: all pairwise distances equal
        x = np.eye(4)
        aff = joint_affinities(x, perplexity=3.0)
        np.testing.assert_allclose(aff.conditional[0, 1:], 1.0 / 3.0, atol=1e-9)

    def test_invariants_on_clusters(self):
        x, _ = _clusters()
        aff = joint_affinities(x, perplexity=30.0)
        p = aff.joint
        assert np.all(p >= 0.0)
        np.testing.assert_allclose(p, p.T, atol=1e-12)
        assert abs(p.sum() - 1.0) <= 1e-6
        rows = aff.conditional.sum(axis=1)
        np.testing.assert_allclose(rows, 1.0, atol=1e-5)

    def test_bisection_hits_target_entropy(self):
        x, _ = _clusters()
        perplexity = 30.0
        aff = joint_affinities(x, perplexity)
        assert aff.converged.all()
        target = np.log2(perplexity)
        for i in range(0, len(x), 17):
            row = aff.conditional[i]
            nz = row[row > 0]
            entropy = -(nz * np.log2(nz)).sum()
            assert abs(entropy - target) <= 1e-5 * target * 10  # slack for re-derivation


class TestTsne:
    def test_cluster_recovery(self):
        x, labels = _clusters()
        cfg = TsneConfig(perplexity=30.0, iterations=400, seed=0)
        result = tsne(x, cfg)
        assert result.kl_trace[-1] <= result.kl_trace[0]
        y = result.embedding
        d = ((y[:, None, :] - y[None]) ** 2).sum(axis=2)
        np.fill_diagonal(d, np.inf)
        nn = d.argmin(axis=1)
        agreement = (labels[nn] == labels).mean()
        assert agreement >= 0.9

    def test_deterministic_per_seed(self):
        x, _ = _clusters(n_per=5, separation=10.0)
        cfg = TsneConfig(perplexity=4.0, iterations=50, seed=3)
        a = tsne(x, cfg).embedding
        b = tsne(x, cfg).embedding
        assert np.array_equal(a, b)

    def test_perplexity_clamped(self):
        x, _ = _clusters(n_per=4, separation=10.0)  # n = 12
        cfg = TsneConfig(perplexity=30.0, iterations=10, seed=0)
        result = tsne(x, cfg)  # clamp keeps it runnable
        assert result.embedding.shape == (12, 2)

    def test_identical_rows_rejected(self):
        x = np.ones((12, 4))
        with pytest.raises(ValueError, match="identical"):
            tsne(x, TsneConfig(perplexity=2.0, iterations=5))

    def test_too_few_points_rejected(self):
        with pytest.raises(ValueError, match="at least 10"):
            tsne(np.random.default_rng(0).standard_normal((5, 3)), TsneConfig())


class TestEmitters:
    def test_svg_circle_count(self, tmp_path):
        path = tmp_path / "plot.svg"
        emit_scatter_svg(np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 0.5]]), [0, 1, 2], path)
        text = path.read_text()
        assert text.count("<circle ") == 3
        assert text.startswith("<svg ")

    def test_svg_byte_deterministic(self, tmp_path):
        y = np.random.default_rng(0).standard_normal((20, 2))
        labels = np.arange(20) % 10
        p1, p2 = tmp_path / "a.svg", tmp_path / "b.svg"
        emit_scatter_svg(y, labels, p1)
        emit_scatter_svg(y, labels, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_svg_empty_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="empty"):
            emit_scatter_svg(np.zeros((0, 2)), [], tmp_path / "no.svg")

    def test_svg_palette_cycles(self, tmp_path):
        path = tmp_path / "cycle.svg"
        emit_scatter_svg(np.array([[0.0, 0.0], [1.0, 1.0]]), [0, 10], path)
        text = path.read_text()
        assert text.count("#1f77b4") == 2  # label 10 wraps to colour 0

    def test_embedding_csv_format(self, tmp_path):
        path = tmp_path / "emb.csv"
        write_embedding_csv(path, np.array([[1.5, -2.25]]), [4])
        lines = path.read_text().splitlines()
        assert lines[0] == "index,label,x,y"
        assert lines[1] == "0,4,1.5,-2.25"

    def test_metrics_and_confusion_csv(self, tmp_path):
        labels = np.array([0, 1, 1])
        report = evaluate(_OracleModel(labels, 2), _dataset(labels, 2))
        write_metrics_csv(tmp_path / "m.csv", report)
        write_confusion_csv(tmp_path / "c.csv", report, ["x", "y"])
        m = (tmp_path / "m.csv").read_text().splitlines()
        assert m[0] == "metric,value"
        assert m[1] == "accuracy,1.0"
        c = (tmp_path / "c.csv").read_text().splitlines()
        assert c[1] == "x,1,0"
        assert c[2] == "y,0,2"
