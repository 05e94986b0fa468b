import math

import pytest
import torch

from syncdg import ValidationError
from syncdg.domain_stream import circle_boundary_label, generate_circle, split_domains
from syncdg.evaluation import (
    CurvePoint,
    compute_metrics,
    decision_boundary_grid,
    disentanglement_curve,
    grid_points,
    load_grid,
    metrics_table,
    render_curve_png,
    render_grid_png,
    save_grid,
)
from syncdg.predictor import PredictionRecord, predict_sequence
from syncdg.trainer import RunManifest, TrainConfig, train


def record(t, accuracy, n=4, classes=2):
    logits = torch.zeros((n, classes), dtype=torch.float64)
    k = round(accuracy * n)
    labels = torch.zeros(n, dtype=torch.int64)
    labels[k:] = 1
    return PredictionRecord(
        domain_index=t,
        predictions=torch.zeros(n, dtype=torch.int64),
        logits=logits,
        labels=labels,
        accuracy=accuracy,
    )


class TestComputeMetrics:
    def test_two_domains(self):
        report = compute_metrics([record(1, 0.6), record(2, 0.8)], dataset="d", method="m", seed=3)
        assert report.worst == 0.6
        assert abs(report.average - 0.7) < 1e-12
        assert report.dataset == "d" and report.method == "m" and report.seed == 3

    def test_single_domain_worst_equals_average(self):
        report = compute_metrics([record(5, 0.75)])
        assert report.worst == report.average == 0.75

    def test_permutation_invariant(self):
        records = [record(1, 0.5), record(2, 0.9), record(3, 0.7)]
        a = compute_metrics(records)
        b = compute_metrics(list(reversed(records)))
        assert a.worst == b.worst and a.average == b.average

    def test_invariant_ordering(self):
        report = compute_metrics([record(1, 0.4), record(2, 0.6), record(3, 0.95)])
        assert report.worst <= report.average <= max(report.domain_accuracies.values())

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            compute_metrics([])

    def test_unlabeled_rejected(self):
        bad = PredictionRecord(
            domain_index=1,
            predictions=torch.zeros(2, dtype=torch.int64),
            logits=torch.zeros((2, 2), dtype=torch.float64),
        )
        with pytest.raises(ValidationError):
            compute_metrics([bad])

    def test_table_layout(self):
        reports = [
            compute_metrics([record(1, 0.5)], dataset="circle", method="sync", seed=0),
            compute_metrics([record(1, 0.25)], dataset="circle", method="erm", seed=0),
        ]
        text = metrics_table(reports)
        lines = text.strip().split("\n")
        assert lines[0] == "method,dataset,seed,worst,average"
        assert lines[1].startswith("sync,circle,0,0.5,")
        assert lines[2].startswith("erm,circle,0,0.25,")


class TestDisentanglementCurve:
    @staticmethod
    def _manifest(values):
        m = RunManifest(method="sync", dataset="d", config={}, seed=0, code_hash="x")
        for i, v in enumerate(values, start=1):
            m.add_epoch({"epoch": i, "mi_probe": v})
        return m

    def test_series_length_matches_epochs(self):
        points = disentanglement_curve(self._manifest([3.0, 2.0, 1.5]))
        assert len(points) == 3
        assert [p.epoch for p in points] == [1, 2, 3]

    def test_constant_series_is_flat(self):
        points = disentanglement_curve(self._manifest([2.0, 2.0, 2.0]))
        assert all(p.non_increasing for p in points)
        assert all(p.mi == 2.0 for p in points)

    def test_monotone_tags(self):
        points = disentanglement_curve(self._manifest([3.0, 2.0, 2.5, 1.0]))
        assert [p.non_increasing for p in points] == [True, True, False, True]

    def test_accepts_plain_dict(self):
        points = disentanglement_curve({"epochs": [{"epoch": 1, "mi_probe": 1.25}]})
        assert points == [CurvePoint(epoch=1, mi=1.25, non_increasing=True)]

    def test_missing_field_rejected(self):
        m = RunManifest(method="sync", dataset="d", config={}, seed=0, code_hash="x")
        m.add_epoch({"epoch": 1})
        with pytest.raises(ValidationError):
            disentanglement_curve(m)

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            disentanglement_curve({"epochs": []})


class TestGridPoints:
    def test_inclusive_bounds(self):
        pts = grid_points((-1.0, 1.0, 0.0, 2.0), 5)
        assert pts.shape == (25, 2)
        assert float(pts[0, 0]) == -1.0 and float(pts[0, 1]) == 0.0
        assert float(pts[-1, 0]) == 1.0 and float(pts[-1, 1]) == 2.0

    def test_row_major_y_first(self):
        pts = grid_points((0.0, 1.0, 10.0, 11.0), 3)
        # first block of 3 shares the lowest y
        assert torch.equal(pts[:3, 1], torch.full((3,), 10.0, dtype=torch.float64))
        assert torch.equal(pts[:3, 0], torch.linspace(0, 1, 3, dtype=torch.float64))

    def test_count_is_resolution_squared(self):
        assert grid_points((0, 1, 0, 1), 100).shape == (10000, 2)

    def test_bad_bounds_rejected(self):
        with pytest.raises(ValidationError):
            grid_points((1.0, 1.0, 0.0, 2.0), 4)
        with pytest.raises(ValidationError):
            grid_points((0.0, 1.0, 0.0), 4)

    def test_analytic_half_plane_reference(self):
        # the generator's own labeling over the lattice is the rotating
        # half-plane: compare against a direct sign computation
        for angle in (0.0, math.pi / 4, math.pi / 2, 2.0):
            pts = grid_points((-2.0, 2.0, -2.0, 2.0), 21)
            labels = circle_boundary_label(pts, angle).reshape(21, 21)
            normal = torch.tensor([-math.sin(angle), math.cos(angle)], dtype=torch.float64)
            expected = ((pts @ normal) >= 0).to(torch.int64).reshape(21, 21)
            assert torch.equal(labels, expected)


@pytest.fixture(scope="module")
def small_run():
    seq = generate_circle(10, 48, seed=0)
    source, intermediate, targets = split_domains(seq)
    cfg = TrainConfig(
        dataset="circle",
        batch_size=16,
        epochs=2,
        learning_rate=1e-3,
        latent_dim=6,
        hidden_dim=16,
        probe_samples=64,
    )
    result = train(cfg, source, intermediate)
    return result, intermediate, targets


class TestDecisionBoundaryGrid:
    def test_shape_and_determinism(self, small_run):
        result, _, targets = small_run
        grid = decision_boundary_grid(result.model, result.bank, (-2, 2, -2, 2), 20, targets.domains[0].t)
        again = decision_boundary_grid(result.model, result.bank, (-2, 2, -2, 2), 20, targets.domains[0].t)
        assert grid.shape == (20, 20)
        assert grid.dtype == torch.int64
        assert torch.equal(grid, again)
        assert set(grid.unique().tolist()) <= {0, 1}

    def test_bank_snapshot_unchanged(self, small_run):
        result, _, targets = small_run
        before = len(result.bank)
        decision_boundary_grid(result.model, result.bank, (-2, 2, -2, 2), 8, targets.domains[0].t)
        assert len(result.bank) == before

    def test_rejects_bad_inputs(self, small_run):
        result, _, _ = small_run
        with pytest.raises(ValidationError):
            decision_boundary_grid(result.model, result.bank, (-2, 2, -2, 2), 8, 0)
        from syncdg.latent_model import HiddenStateBank

        with pytest.raises(ValidationError):
            decision_boundary_grid(result.model, HiddenStateBank(), (-2, 2, -2, 2), 8, 1)

    def test_non_2d_model_rejected(self, small_run):
        from syncdg.latent_model import SyncModel

        torch.manual_seed(0)
        model = SyncModel(feature_dim=3, num_classes=2, latent_dim=4, hidden_dim=8)
        result, _, _ = small_run
        with pytest.raises(ValidationError):
            decision_boundary_grid(model, result.bank, (-2, 2, -2, 2), 8, 1)

    def test_save_load_round_trip(self, small_run, tmp_path):
        result, _, targets = small_run
        t = targets.domains[0].t
        grid = decision_boundary_grid(result.model, result.bank, (-2, 2, -2, 2), 12, t)
        save_grid(tmp_path / "g.txt", grid, (-2, 2, -2, 2), t)
        loaded, bounds, domain_t = load_grid(tmp_path / "g.txt")
        assert torch.equal(loaded, grid)
        assert bounds == (-2.0, 2.0, -2.0, 2.0)
        assert domain_t == t

    def test_load_rejects_foreign_file(self, tmp_path):
        (tmp_path / "bad.txt").write_text("not a grid\n")
        with pytest.raises(ValidationError):
            load_grid(tmp_path / "bad.txt")


class TestRenders:
    def test_grid_png(self, tmp_path):
        grid = torch.zeros((8, 8), dtype=torch.int64)
        grid[:, 4:] = 1
        render_grid_png(grid, (-1, 1, -1, 1), tmp_path / "grid.png", title="t")
        assert (tmp_path / "grid.png").stat().st_size > 0

    def test_curve_png(self, tmp_path):
        points = [CurvePoint(1, 3.0, True), CurvePoint(2, 2.0, True)]
        render_curve_png(points, tmp_path / "curve.png", title="c")
        assert (tmp_path / "curve.png").stat().st_size > 0

    def test_empty_curve_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            render_curve_png([], tmp_path / "x.png")


class TestMetricsEndToEnd:
    def test_report_from_real_predictions(self, small_run):
        result, intermediate, targets = small_run
        bank = result.bank.clone()
        predict_sequence(result.model, bank, intermediate, seed=0)
        records = predict_sequence(result.model, bank, targets, seed=0)
        report = compute_metrics(records, dataset="circle", method="sync", seed=0)
        assert len(report.domain_accuracies) == len(targets.domains)
        assert 0.0 <= report.worst <= report.average <= 1.0
