"""Calibration tests: the fit reproduces the baked cluster constants."""

import dataclasses

import pytest

from dicesim.calibration import (PROBE_STEPS, TARGET_SHARES, calibrated_cluster,
                                 fit_cost_model, measure_profile,
                                 measured_share, predicted_share)
from dicesim.cluster import (DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_COMPUTE_RATE,
                             DEFAULT_OP_OVERHEAD)


class TestMeasureProfile:
    def test_per_step_op_count(self):
        # Five charges per layer (local, gate, expert, shared, consume) plus
        # the end-of-step update, on the 28-layer preset.
        point = measure_profile(batch=4)
        assert point.ops_per_step == 5 * 28 + 1

    def test_bytes_scale_roughly_linearly_with_batch(self):
        # Routing noise keeps this from being exact: doubling the batch
        # doubles the candidate pairs but remote membership is data-driven.
        small, large = measure_profile(batch=4), measure_profile(batch=8)
        assert large.max_bytes_per_step == pytest.approx(
            2 * small.max_bytes_per_step, rel=0.05)
        assert large.elems_per_step > small.elems_per_step


class TestFit:
    def test_reproduces_baked_constants(self):
        fit = fit_cost_model()
        assert fit.alpha == DEFAULT_ALPHA
        assert fit.compute_rate == DEFAULT_COMPUTE_RATE
        assert fit.beta == pytest.approx(DEFAULT_BETA, rel=1e-12)
        assert fit.op_overhead_elements == DEFAULT_OP_OVERHEAD

    def test_fitted_shares_near_targets_and_rising(self):
        fit = fit_cost_model()
        shares = [fit.fitted_shares[b] for b in sorted(TARGET_SHARES)]
        assert shares == sorted(shares)
        for batch, target in TARGET_SHARES.items():
            assert fit.fitted_shares[batch] == pytest.approx(target, abs=0.02)

    def test_predicted_share_increases_with_beta(self):
        point = measure_profile(batch=4)
        low = predicted_share(point, beta=1e-8, overhead=0.0,
                              compute_rate=DEFAULT_COMPUTE_RATE)
        high = predicted_share(point, beta=1e-6, overhead=0.0,
                               compute_rate=DEFAULT_COMPUTE_RATE)
        assert 0 < low < high < 1


class TestMeasuredShare:
    @pytest.mark.parametrize("batch", sorted(TARGET_SHARES))
    def test_real_run_share_tracks_target(self, batch):
        assert measured_share(batch) == pytest.approx(
            TARGET_SHARES[batch], abs=0.05)

    def test_probe_steps_match_full_run_shares(self):
        # The per-step profile is stationary, so a short probe predicts the
        # share of a longer run.
        short = measured_share(4, steps=PROBE_STEPS)
        longer = measured_share(4, steps=3 * PROBE_STEPS)
        assert longer == pytest.approx(short, abs=0.005)


class TestCalibratedCluster:
    def test_defaults(self):
        cluster = calibrated_cluster()
        assert cluster.alpha == DEFAULT_ALPHA
        assert cluster.beta == DEFAULT_BETA
        assert cluster.compute_rate == DEFAULT_COMPUTE_RATE
        assert cluster.op_overhead_elements == DEFAULT_OP_OVERHEAD
        assert cluster.num_devices == 8

    def test_overrides(self):
        cluster = calibrated_cluster(devices=4, alpha=1e-6)
        assert cluster.num_devices == 4
        assert cluster.alpha == 1e-6
        assert dataclasses.replace(cluster, num_devices=8, alpha=DEFAULT_ALPHA) \
            == calibrated_cluster()
