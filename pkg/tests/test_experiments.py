"""Tests for synthetic targets, recovery metrics and the evaluation harnesses."""

import numpy as np
import pandas as pd
import pytest

from latent_meshfit.experiments import (
    GRAD_CHECK_COLUMNS,
    GradCheckSettings,
    SyntheticSettings,
    eta_grid,
    foreground_texture_mae,
    make_synthetic,
    mask_iou,
    render_latent,
    run_ablation,
    run_grad_checks,
    run_sensitivity,
    run_synthetic_suite,
    sensitivity_camera,
    sensitivity_cameras,
    snap32,
    summarize_sensitivity,
)
from latent_meshfit.files import quantize


class TestSynthetic:
    """Tests for make_synthetic."""

    def test_deterministic(self, small_decoder, small_topology):
        """The same seed gives the same target."""
        a = make_synthetic(small_decoder, small_topology, 3, 32)
        b = make_synthetic(small_decoder, small_topology, 3, 32)
        assert np.array_equal(a.target.image, b.target.image)
        assert np.array_equal(a.z, b.z)
        assert np.array_equal(a.target.init_pose.to_vector(), b.target.init_pose.to_vector())

    def test_truth_reproduces_target(self, small_decoder, small_topology, small_synthetic):
        """Re-rendering the stored latent and pose reproduces the target bitwise."""
        render = render_latent(
            small_decoder, small_topology, small_synthetic.z, small_synthetic.pose, 32
        )
        assert np.array_equal(quantize(render.image), small_synthetic.target.image)
        assert np.array_equal(render.mask, small_synthetic.target.mask)

    def test_values_are_32_bit(self, small_synthetic):
        """Sampled latents and poses survive a 32-bit round trip."""
        assert np.array_equal(snap32(small_synthetic.z), small_synthetic.z)
        vector = small_synthetic.target.init_pose.to_vector()
        assert np.array_equal(snap32(vector), vector)

    def test_coverage(self, small_synthetic):
        """The target silhouette covers at least 5% of the image."""
        assert small_synthetic.coverage >= 0.05
        assert small_synthetic.target.mask.mean() == pytest.approx(small_synthetic.coverage)

    def test_initial_camera_is_perturbed(self, small_synthetic):
        """The initial scale differs from the truth by 5%."""
        ratio = small_synthetic.target.init_pose.scale / small_synthetic.pose.scale
        assert abs(ratio - 1.0) == pytest.approx(0.05, abs=1e-6)
        record = small_synthetic.perturbation
        assert record["rotation_deg"] == 5.0
        assert np.linalg.norm(record["translation_offset"]) == pytest.approx(0.02)

    def test_truth_dict(self, small_synthetic):
        """truth_dict names the seed, both poses and the perturbation."""
        data = small_synthetic.truth_dict()
        assert set(data) == {"seed", "pose", "init_pose", "perturbation", "coverage"}
        assert data["seed"] == 0


class TestMetrics:
    """Tests for mask_iou and foreground_texture_mae."""

    def test_iou(self):
        """Identical masks give 1 and disjoint masks give 0."""
        a = np.zeros((4, 4), bool)
        a[:2] = True
        assert mask_iou(a, a) == 1.0
        assert mask_iou(a, ~a) == 0.0
        b = np.zeros((4, 4), bool)
        b[:1] = True
        assert mask_iou(a, b) == 0.5

    def test_texture_mae_no_overlap(self):
        """Without shared foreground the error is NaN."""
        a = np.zeros((4, 4), bool)
        a[:2] = True
        image = np.zeros((4, 4, 3))
        assert np.isnan(foreground_texture_mae(image, a, image, ~a))

    def test_texture_mae(self):
        """The error averages over the shared foreground only."""
        mask = np.ones((2, 2), bool)
        a = np.zeros((2, 2, 3))
        b = np.full((2, 2, 3), 0.25)
        assert foreground_texture_mae(a, mask, b, mask) == pytest.approx(0.25)


class TestEtaGrid:
    """Tests for eta_grid."""

    def test_default_grid(self):
        """Three points per decade from 1e-6 to 1e-1 gives 16 values."""
        etas = eta_grid()
        assert len(etas) == 16
        assert etas[0] == pytest.approx(1e-6)
        assert etas[-1] == pytest.approx(0.1)
        assert np.all(np.diff(etas) > 0)

    def test_invalid_grid(self):
        """An empty range is rejected."""
        with pytest.raises(ValueError):
            eta_grid(-1, -1)


class TestSensitivity:
    """Tests for run_sensitivity and summarize_sensitivity."""

    def test_control_rows_are_zero(self, small_decoder, small_topology):
        """The eta = 0 row leads each shape and every loss is 0 there."""
        frame = run_sensitivity(
            small_decoder, small_topology, 2, eta_grid(-3, -1, 1), 128, 32, seed=0
        )
        assert len(frame) == 2 * 4
        control = frame[frame["eta"] == 0.0]
        assert control["shape_id"].tolist() == [0, 1]
        assert (control["cd3d"] == 0.0).all()
        assert (control["l_cm"] == 0.0).all()
        assert (control["l_iou"] == 0.0).all()
        assert (control["l_l1"] == 0.0).all()
        assert frame.groupby("shape_id")["eta"].first().tolist() == [0.0, 0.0]

    def test_deterministic(self, small_decoder, small_topology):
        """The same seed gives identical rows."""
        etas = eta_grid(-2, -1, 1)
        a = run_sensitivity(small_decoder, small_topology, 1, etas, 64, 32, seed=4)
        b = run_sensitivity(small_decoder, small_topology, 1, etas, 64, 32, seed=4)
        pd.testing.assert_frame_equal(a, b)

    def test_cameras_are_recorded(self):
        """The camera table lists the pose each shape was rendered from."""
        settings = SyntheticSettings()
        table = sensitivity_cameras(3, 5, settings)
        assert table["shape_id"].tolist() == [0, 1, 2]
        vector = sensitivity_camera(5, 1, settings).to_vector()
        assert table.iloc[1, 1:].tolist() == [float(v) for v in vector]

    def test_summary_slopes(self):
        """Power laws in cd3d give their exponent as the mean slope."""
        etas = np.logspace(-3, -2, 4)
        frame = pd.DataFrame(
            {
                "shape_id": 0,
                "eta": etas,
                "cd3d": etas**2,
                "l_cm": etas**2,
                "l_iou": 0.0,
                "l_l1": etas,
                "degenerate": False,
            }
        )
        summary = summarize_sensitivity(frame, -3, -2).set_index("loss")
        assert summary.loc["l_cm", "mean_slope"] == pytest.approx(1.0)
        assert summary.loc["l_l1", "mean_slope"] == pytest.approx(0.5)
        assert np.isnan(summary.loc["l_iou", "mean_slope"])
        assert summary.loc["l_iou", "zero_fraction"] == 1.0
        assert summary.loc["l_cm", "n_fits"] == 1

    def test_summary_drops_degenerate_rows(self):
        """Degenerate rows do not enter the fits."""
        etas = np.logspace(-3, -2, 3)
        frame = pd.DataFrame(
            {
                "shape_id": 0,
                "eta": etas,
                "cd3d": etas,
                "l_cm": etas,
                "l_iou": etas,
                "l_l1": etas,
                "degenerate": [False, True, True],
            }
        )
        summary = summarize_sensitivity(frame, -3, -2)
        assert (summary["n_fits"] == 0).all()


class TestHarnesses:
    """Tests for the suite, ablation and gradient harnesses."""

    def test_suite_columns(self, small_decoder, small_topology, small_inversion_config):
        """One suite target gives one row of metrics."""
        frame = run_synthetic_suite(
            small_decoder, small_topology, small_inversion_config, 1, 0, 32, n_points=128
        )
        assert list(frame.columns) == ["target_seed", "iou", "cd3d", "tex_mae", "best_total"]
        assert 0.0 <= frame["iou"].iloc[0] <= 1.0
        assert frame["cd3d"].iloc[0] >= 0.0

    def test_ablation_rejects_unknown_camera(
        self, small_decoder, small_topology, small_inversion_config
    ):
        """Camera modes other than fine-tuned and fixed are rejected."""
        with pytest.raises(ValueError, match="camera mode"):
            run_ablation(
                small_decoder, small_topology, small_inversion_config, 1, 0, 32,
                cameras=["orbit"],
            )

    def test_grad_checks_pass(self):
        """Every analytic gradient agrees with central differences at one configuration."""
        frame = run_grad_checks(0, GradCheckSettings(n_configs=1))
        assert list(frame.columns) == GRAD_CHECK_COLUMNS
        assert frame["check"].tolist() == [
            "pct", "fct", "cm", "smooth", "lz", "decode", "objective"
        ]
        assert frame["passed"].all()


@pytest.mark.slow
class TestSensitivityReproduction:
    """Acceptance-scale sensitivity run at 128 x 128."""

    def test_mask_loss_slopes(self, default_decoder, default_topology):
        """Chamfer mask loss tracks cd3d linearly; rasterized losses flatten at small jitter."""
        frame = run_sensitivity(
            default_decoder, default_topology, 3, eta_grid(), 4096, 128, seed=0
        )
        jittered = frame[frame["eta"] > 0]
        for _, shape in jittered.groupby("shape_id"):
            cd3d = shape["cd3d"][shape["cd3d"] > 0]
            assert np.log10(cd3d.max() / cd3d.min()) >= 3.0

        summary = summarize_sensitivity(frame)
        cm = summary[(summary["loss"] == "l_cm") & summary["mean_cd3d"].between(1e-6, 1e-2)]
        assert len(cm) > 0
        assert cm["mean_slope"].between(0.9, 1.1).all()
        for loss in ("l_iou", "l_l1"):
            rows = summary[summary["loss"] == loss]
            flat = (rows["mean_slope"] < 0.5) | (rows["zero_fraction"] >= 0.2)
            assert flat.any()
