import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gialab.attacks import PairedAttackParams, apply_binning, apply_paired
from gialab.data import gen_synthetic
from gialab.detection import (
    PRESETS,
    ThresholdConfig,
    analyze_gradients,
    analyze_loss,
    bias_anomaly,
    detect_handcrafted,
    grad_divergence,
    interpolate_configs,
    loss_divergence,
    neuron_diversity,
    preset,
    rank_ratio,
    run_detectors,
    safe_ratio,
    weight_entropy,
)
from gialab.exceptions import ConfigError, DomainError, ShapeError
from gialab.nn import desk_model, init_model

from conftest import random_data


def brute_diversity(W):
    n = W.shape[0]
    total = 0.0
    for i, j in itertools.permutations(range(n), 2):
        total += math.sqrt(sum((a - b) ** 2 for a, b in zip(W[i], W[j])))
    return total / (n * (n - 1))


# ---------------------------------------------------------------- D / H / R / B


def test_diversity_identical_rows():
    assert neuron_diversity(np.ones((5, 3))) == 0.0


def test_diversity_hand_geometry():
    assert neuron_diversity(np.array([[0.0, 0.0], [3.0, 4.0]])) == 5.0


@pytest.mark.parametrize("seed", range(3))
def test_diversity_matches_brute_force(seed):
    W = np.random.default_rng(seed).standard_normal((16, 8))
    assert abs(neuron_diversity(W) - brute_diversity(W)) < 1e-12


def test_diversity_scales_linearly():
    W = np.random.default_rng(0).standard_normal((6, 4))
    assert neuron_diversity(2 * W) == pytest.approx(2 * neuron_diversity(W), rel=1e-14)


def test_diversity_single_row():
    with pytest.raises(ShapeError):
        neuron_diversity(np.ones((1, 3)))


def test_entropy_constant_is_zero():
    assert weight_entropy(np.full((4, 4), 0.3)) == 0.0


def test_entropy_four_values_two_bits():
    W = np.array([[0.0, 1.0], [2.0, 3.0]]).repeat(3, axis=1)
    assert weight_entropy(W, bins=4) == pytest.approx(2.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_entropy_gaussian_above_standard_threshold(seed):
    W = np.random.default_rng(seed).standard_normal((64, 64))
    assert weight_entropy(W, 64) > preset("standard").tau_H


def test_entropy_bins_validated():
    with pytest.raises(DomainError):
        weight_entropy(np.eye(2), bins=1)


def test_rank_identity():
    assert rank_ratio(np.eye(8)) == 1.0


def test_rank_equal_rows():
    assert rank_ratio(np.tile(np.arange(1.0, 9.0), (16, 1))) == 0.125


def test_rank_paired_rows():
    rng = np.random.default_rng(0)
    base = rng.standard_normal((4, 16))
    W = np.empty((8, 16))
    W[0::2] = base
    W[1::2] = -rng.uniform(0.5, 2, (4, 1)) * base
    assert rank_ratio(W) <= 0.5


def test_bias_arithmetic_progression():
    assert bias_anomaly([1, 2, 3, 4]) == (1, 1, 2)


def test_bias_not_monotone():
    assert bias_anomaly([0.3, -1.2, 0.8])[0] == 0


def test_bias_descending_counts():
    b_m, _, B = bias_anomaly([5.0, 2.0, 1.5, -3.0])
    assert b_m == 1 and B >= 1


def test_bias_too_short():
    with pytest.raises(DomainError):
        bias_anomaly([1.0, 2.0])


def test_binning_biases_trip_b():
    aux = gen_synthetic(4, 16, 100, 0.5, seed=0)
    model, _ = apply_binning(desk_model(16, 4, 16, seed=0), aux)
    assert bias_anomaly(model.layers[2].bias)[2] >= 1


# ---------------------------------------------------------------- static scan


def test_fresh_models_not_flagged():
    cfg = preset("standard")
    assert not any(detect_handcrafted(desk_model(16, 4, 16, seed=s), cfg)[1] for s in range(50))


@pytest.mark.parametrize("k", [8, 16, 32, 64])
def test_binning_always_flagged(k):
    aux = gen_synthetic(4, 16, 200, 0.5, seed=k)
    model, _ = apply_binning(desk_model(16, 4, k, seed=k), aux)
    scores, flag = detect_handcrafted(model, preset("standard"))
    assert flag
    assert "D" in scores[2].reasons and scores[2].D == 0.0


@pytest.mark.parametrize("lo,hi", [(0.1, 0.5), (0.5, 2.0), (2.0, 10.0)])
def test_paired_always_flagged(lo, hi):
    for seed in range(5):
        params = PairedAttackParams.random(8, 2, seed=seed, low=lo, high=hi)
        model = apply_paired(desk_model(16, 4, 16, seed=seed), params)
        scores, flag = detect_handcrafted(model, preset("standard"))
        assert flag and "R" in scores[2].reasons


def test_output_head_exempt_from_static_checks():
    scores, _ = detect_handcrafted(desk_model(16, 3, 16), preset("aggressive"))
    last = scores[-1]
    assert last.D is None and last.H is None and last.R is None and last.B is None


# ---------------------------------------------------------------- ratios / loss divergence


def test_safe_ratio_conventions():
    assert safe_ratio(0.0, 0.0) == 1.0
    assert safe_ratio(2.0, 0.0) == math.inf
    assert safe_ratio(3.0, 1.5) == 2.0


def test_loss_identity_all_quiet():
    model = desk_model(16, 4, 16, seed=0)
    data = random_data(32, 16, 4, seed=0)
    for name in PRESETS:
        div, flag = analyze_loss(model, model, data, preset(name))
        assert not flag and div.A == (0, 0, 0, 0)
        assert div.r_lmax == div.r_p95 == div.r_cv == 1.0


def test_loss_scaled_hundredfold():
    prev = np.linspace(0.01, 0.5, 40)
    div, flag = loss_divergence(100 * prev, prev, preset("standard"))
    assert div.A[0] == 1 and div.A[2] == 1 and flag
    assert div.r_lmax == pytest.approx(100.0) and div.r_p95 == pytest.approx(100.0)


def test_loss_spike_fraction():
    prev = np.full(20, 1.0)
    prev[0] = 1.1
    cur = prev.copy()
    cur[:5] = 50.0
    div, _ = loss_divergence(cur, prev, preset("standard"))
    assert div.r_spikes == 0.25


def test_loss_needs_sixteen_samples():
    model = desk_model(16, 4, 16)
    with pytest.raises(DomainError):
        analyze_loss(model, model, random_data(15, 16, 4, 0), preset("standard"))


def test_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        analyze_loss(desk_model(16, 4, 16), desk_model(16, 4, 8), random_data(16, 16, 4, 0), preset("standard"))


# ---------------------------------------------------------------- gradient divergence


def test_grad_collapse_all_flags():
    rng = np.random.default_rng(0)
    prev = rng.uniform(0.5, 1.5, 50)
    div, flag = grad_divergence(0.05 * prev, prev, preset("standard"))
    assert div.B == (1, 1, 1) and flag
    assert div.r_norm == pytest.approx(0.95) and div.r_var == pytest.approx(0.95)


def test_grad_identity_quiet():
    model = desk_model(16, 4, 16, seed=1)
    data = random_data(20, 16, 4, seed=1)
    for name in PRESETS:
        div, flag = analyze_gradients(model, model, data, preset(name))
        assert not flag and div.r_norm == 0.0 and div.r_var == 0.0


def test_grad_zero_baseline_is_no_signal():
    div, flag = grad_divergence(np.ones(20), np.zeros(20), preset("aggressive"))
    assert not flag and div.diagnostic


def test_gradient_increase_never_flags():
    prev = np.linspace(0.1, 1, 20)
    assert not grad_divergence(10 * prev, prev, preset("aggressive"))[1]


# ---------------------------------------------------------------- verdicts


def test_verdict_abort_is_or_of_flags():
    model = desk_model(16, 4, 16, seed=2)
    aux = gen_synthetic(4, 16, 100, 0.5, seed=2)
    evil, _ = apply_binning(model, aux)
    v = run_detectors(evil, model, aux.subset(range(64)), preset("standard"), round=3, client=1)
    assert v.abort == (v.static_flag or v.loss_flag or v.grad_flag)
    assert v.static_flag and 2 in v.offending_layers
    d = v.to_dict()
    assert d["round"] == 3 and d["client"] == 1 and d["abort"]


def test_verdict_dict_has_no_float_infinities():
    import json

    model = desk_model(16, 4, 16, seed=2)
    data = random_data(16, 16, 4, seed=0)
    v = run_detectors(model, desk_model(16, 4, 16, seed=3), data, preset("standard"))
    json.dumps(v.to_dict(), allow_nan=False)


def test_permutation_invariance():
    model = desk_model(16, 4, 16, seed=4)
    prev = desk_model(16, 4, 16, seed=5)
    data = random_data(40, 16, 4, seed=4)
    shuffled = data.subset(np.random.default_rng(0).permutation(len(data)))
    cfg = preset("standard")
    a, b = run_detectors(model, prev, data, cfg), run_detectors(model, prev, shuffled, cfg)
    assert a.loss.A == b.loss.A and a.grad.B == b.grad.B
    assert a.loss.r_cv == pytest.approx(b.loss.r_cv, rel=1e-12)


# ---------------------------------------------------------------- presets and interpolation


def test_preset_table_values():
    s = preset("standard")
    assert (s.tau_D, s.tau_H, s.tau_R) == (1e-3, 3.0, 0.8)
    assert (s.tau_lmax, s.tau_max_inc, s.tau_spikes, s.tau_p95, s.tau_cv_ratio) == (10.0, 10.0, 0.1, 3.0, 1.5)
    assert (s.tau_g_norm, s.tau_g_var, s.count_loss) == (0.5, 0.2, 2)
    assert preset("conservative").tau_lmax == 25.0
    assert preset("aggressive").tau_g_norm == 1e-5
    assert preset("Conservative").tau_max_inc == 20.0


def test_unknown_preset():
    with pytest.raises(ConfigError):
        preset("paranoid")


def test_threshold_validation():
    with pytest.raises(ConfigError):
        ThresholdConfig.from_dict({**preset("standard").to_dict(), "tau_D": -1.0})
    with pytest.raises(ConfigError):
        ThresholdConfig.from_dict({**preset("standard").to_dict(), "count_loss": 0})
    with pytest.raises(ConfigError):
        ThresholdConfig.from_dict({"bogus": 1})


def test_interpolation_endpoints_and_midpoint():
    lo, hi = preset("conservative"), preset("aggressive")
    two = interpolate_configs(lo, hi, 2)
    assert two[0] == lo and two[1] == hi
    three = interpolate_configs(lo, hi, 3)
    assert three[1].tau_H == 3.0
    assert three[1].count_loss == 2
    assert len(interpolate_configs(lo, hi, 30)) == 30
    with pytest.raises(ConfigError):
        interpolate_configs(lo, hi, 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_flags_monotone_along_sweep(seed):
    """Moving toward Aggressive never clears a flag raised closer to
    Conservative, given the same statistics."""
    rng = np.random.default_rng(seed)
    prev_l = rng.gamma(2.0, 0.3, 32)
    cur_l = prev_l * rng.uniform(0.2, 5.0, 32)
    prev_g = rng.gamma(2.0, 0.5, 32)
    cur_g = prev_g * rng.uniform(0.0, 1.5, 32)
    family = interpolate_configs(preset("conservative"), preset("aggressive"), 30)
    lf = [loss_divergence(cur_l, prev_l, c)[1] for c in family]
    gf = [grad_divergence(cur_g, prev_g, c)[1] for c in family]
    for flags in (lf, gf):
        first = flags.index(True) if True in flags else len(flags)
        assert all(flags[first:])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(sorted(PRESETS)))
def test_identity_safety_property(seed, name):
    model = init_model([8, 12, 8, 6, 3], split_index=2, seed=seed)
    data = random_data(16, 8, 3, seed)
    assert not analyze_loss(model, model, data, preset(name))[1]
    assert not analyze_gradients(model, model, data, preset(name))[1]
