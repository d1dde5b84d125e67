import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
import pytest

from codestream import rng
from codestream.metrics import kl_fit, win_rate
from codestream.profile import Profile
from codestream.rewards import estimate_value, GaussianReward, QuantizedReward, selection_score, UnsupportedRewardError
from codestream.samplers import (base_sample, base_trajectory, blocks_per_run, blockwise, bon_sample, bon_samples,
                                 code_eta_sample, code_eta_samples, code_sample, code_samples, grad_guided_sample,
                                 grad_guided_samples, guided, guided_samples, GuidanceConfig, noise_level,
                                 reference_points, svdd_sample, svdd_samples)
from codestream.streams.diffusion import build_linear_schedule, ddpm_step, denoise
from codestream.trainer import GmmSpec, MixtureDenoiser


# A reward that is the same everywhere: selection always keeps stream 0.
FLAT = QuantizedReward((0.0, 0.0), 1e9)


def test_base_sample_is_reproducible(tiny_model, sched):
    a = base_sample(tiny_model, sched, 5, seed=3)
    assert a.shape == (5, 2)
    assert_array_equal(a, base_sample(tiny_model, sched, 5, seed=3))
    assert not np.array_equal(a, base_sample(tiny_model, sched, 5, seed=4))
    assert_allclose(base_sample(tiny_model, sched, 1, seed=3)[0], a[0], rtol=1e-12, atol=1e-12)
    with pytest.raises(ValueError):
        base_sample(tiny_model, sched, 0, seed=3)


def test_base_trajectory(tiny_model, sched):
    states = base_trajectory(tiny_model, sched, 4, seed=2, every=7)
    assert [t for t, _ in states] == list(range(50, 0, -7)) + [0]
    assert_array_equal(states[0][1], rng.initial_noise(2, range(4)))
    assert_array_equal(states[-1][1], base_sample(tiny_model, sched, 4, seed=2))


def test_single_stream_selection_is_base_sampling(tiny_model, sched, far_reward):
    base = base_sample(tiny_model, sched, 6, seed=11)
    for B in (1, 7, 50):
        assert_array_equal(code_samples(tiny_model, sched, far_reward, 1, B, seed=11, n=6), base)
    assert_array_equal(bon_samples(tiny_model, sched, far_reward, 1, seed=11, n=6), base)
    assert_array_equal(code_sample(tiny_model, sched, far_reward, 1, 10, seed=11),
                       base_sample(tiny_model, sched, 1, seed=11)[0])
    assert_array_equal(bon_sample(tiny_model, sched, far_reward, 1, seed=11), base_sample(tiny_model, sched, 1, seed=11)[0])


def test_special_block_sizes(tiny_model, sched, far_reward):
    for N in (2, 5):
        assert_array_equal(bon_samples(tiny_model, sched, far_reward, N, seed=1, n=4),
                           code_samples(tiny_model, sched, far_reward, N, sched.T, seed=1, n=4))
        assert_array_equal(svdd_samples(tiny_model, sched, far_reward, N, seed=1, n=4),
                           code_samples(tiny_model, sched, far_reward, N, 1, seed=1, n=4))
        assert_array_equal(svdd_sample(tiny_model, sched, far_reward, N, seed=1),
                           code_sample(tiny_model, sched, far_reward, N, 1, seed=1))
        assert_array_equal(code_eta_samples(tiny_model, sched, far_reward, N, 10, 1.0, None, seed=1, n=4),
                           code_samples(tiny_model, sched, far_reward, N, 10, seed=1, n=4))
        assert_array_equal(code_eta_sample(tiny_model, sched, far_reward, N, 10, 1.0, None, seed=1),
                           code_sample(tiny_model, sched, far_reward, N, 10, seed=1))


def test_best_of_n_against_explicit_rollouts(tiny_model, sched, far_reward):
    N, n, seed = 4, 3, 8
    rollouts = denoise(tiny_model, sched, np.repeat(rng.initial_noise(seed, range(n)), N, axis=0), sched.T,
                       rng.noise_table(seed, range(n), N, sched.T)).last()[1].reshape(n, N, 2)
    best = [run[np.argmax(selection_score(far_reward, run))] for run in rollouts]
    assert_array_equal(bon_samples(tiny_model, sched, far_reward, N, seed=seed, n=n), best)


def test_blockwise_matches_exhaustive_enumeration(tiny_model, far_reward):
    sched = build_linear_schedule(4, 0.1, 0.3)
    seed = 21
    z = rng.initial_noise(seed, range(1))
    noise = rng.noise_table(seed, range(1), 2, 4)
    x, winners = z[0], []
    for t_hi in (4, 2):
        candidates = []
        for s in (0, 1):
            y = x[None]
            for t in (t_hi, t_hi - 1):
                y = ddpm_step(tiny_model, sched, y, t, noise[s:s + 1, t - 1])
            candidates.append(y[0])
        values = [estimate_value(tiny_model, sched, far_reward, c, t_hi - 2) for c in candidates]
        assert values[0] != values[1]
        winners.append(int(np.argmax(values)))
        x = candidates[winners[-1]]

    selections = list(blockwise(tiny_model, sched, far_reward, z, 4, 2, 2, noise))
    assert [s.t for s in selections] == [2, 0]
    assert [int(s.winners[0]) for s in selections] == winners
    assert_allclose(selections[-1].x[0], x, rtol=1e-12, atol=1e-12)
    rollouts = selections[0].rollouts(0)
    assert [r.stream for r in rollouts] == [0, 1]
    assert rollouts[winners[0]].value == max(r.value for r in rollouts)
    assert_allclose(code_sample(tiny_model, sched, far_reward, 2, 2, seed=seed), x, rtol=1e-12, atol=1e-12)


def test_short_final_block(tiny_model, sched, far_reward):
    noise = rng.noise_table(0, range(2), 3, sched.T)
    selections = list(blockwise(tiny_model, sched, far_reward, rng.initial_noise(0, range(2)), sched.T, 3, 15, noise))
    assert [s.t for s in selections] == [35, 20, 5, 0]
    assert blocks_per_run(50, 15) == 4
    assert blocks_per_run(600, 80) == 8


def test_ties_go_to_lowest_stream(tiny_model, sched):
    noise = rng.noise_table(0, range(3), 4, sched.T)
    selections = list(blockwise(tiny_model, sched, FLAT, rng.initial_noise(0, range(3)), sched.T, 4, 10, noise))
    for s in selections:
        assert_array_equal(s.winners, 0)


def test_work_counters(tiny_model):
    sched = build_linear_schedule(1000)
    spec = GaussianReward((1.0, 1.0), 1.0)
    prof = Profile()
    code_samples(tiny_model, sched, spec, 3, 100, seed=0, n=2, profile=prof)
    assert prof['selections'] == 2 * 10
    assert prof['model_evals'] == 2 * 3 * 1000
    assert prof['reward_queries'] == 2 * 3 * 10

    prof.reset()
    code_eta_samples(tiny_model, sched, spec, 4, 100, 0.55, (1.0, 1.0), seed=0, n=1, profile=prof)
    assert prof['selections'] == 6
    assert prof['model_evals'] == 4 * 550
    assert prof['reward_queries'] == 4 * 6

    prof.reset()
    base_sample(tiny_model, sched, 3, seed=0, profile=prof)
    assert prof['model_evals'] == 3000
    assert prof['reward_queries'] == 0

    prof.reset()
    grad_guided_samples(tiny_model, sched, spec, 0.0, seed=0, n=2, profile=prof)
    assert (prof['model_evals'], prof['reward_queries']) == (2000, 0)
    grad_guided_samples(tiny_model, sched, spec, 1.0, seed=0, n=2, profile=prof)
    assert (prof['model_evals'], prof['reward_queries']) == (4000, 2000)


def test_results_do_not_depend_on_workers(tiny_model, sched, far_reward):
    serial = code_samples(tiny_model, sched, far_reward, 64, 10, seed=5, n=130)
    parallel = code_samples(tiny_model, sched, far_reward, 64, 10, seed=5, n=130, workers=3)
    assert_array_equal(serial, parallel)
    assert_array_equal(base_sample(tiny_model, sched, 20, seed=5), base_sample(tiny_model, sched, 20, seed=5, workers=4))


def test_flat_reward_keeps_base_distribution(exact, sched):
    flat = code_samples(exact, sched, FLAT, 4, 10, seed=1, n=2000)
    base = base_sample(exact, sched, 2000, seed=2)
    assert kl_fit(flat, base) <= 0.02
    assert_allclose(code_samples(exact, sched, FLAT, 4, 10, seed=1, n=50), base_sample(exact, sched, 50, seed=1),
                    rtol=1e-12, atol=1e-12)


def test_invalid_selection_parameters(tiny_model, sched, far_reward):
    for N, B in ((0, 10), (2, 0), (2, 51), (2.5, 10)):
        with pytest.raises(ValueError):
            code_samples(tiny_model, sched, far_reward, N, B, seed=0, n=1)
    with pytest.raises(ValueError):
        code_eta_samples(tiny_model, sched, far_reward, 2, 10, 0.5, None, seed=0, n=1)
    with pytest.raises(ValueError):
        code_eta_samples(tiny_model, sched, far_reward, 2, 10, 0.5, np.zeros((3, 2)), seed=0, n=2)
    with pytest.raises(ValueError):
        code_eta_samples(tiny_model, sched, far_reward, 2, 30, 0.5, (0.0, 0.0), seed=0, n=1)


def test_noise_level():
    assert noise_level(0.6, 1000) == 600
    assert noise_level(1.0, 7) == 7
    assert noise_level(0.5, 3) == 2
    assert noise_level(0.02, 50) == 1
    for eta in (0.0, 1.5):
        with pytest.raises(ValueError):
            noise_level(eta, 100)
    with pytest.raises(ValueError):
        noise_level(0.004, 100)


def test_tiny_noise_level_returns_reference(exact, sched, far_reward):
    x_ref = np.array([9.0, 1.0])
    out = code_eta_samples(exact, sched, far_reward, 1, 1, 0.02, x_ref, seed=0, n=20)
    assert_allclose(out, np.tile(x_ref, (20, 1)), atol=0.2)
    refs = reference_points(far_reward, 4, 20)
    out = code_eta_samples(exact, sched, far_reward, 1, 1, 0.02, refs, seed=0, n=20)
    assert_allclose(out, refs, atol=0.2)


def test_reference_points(far_reward):
    refs = reference_points(far_reward, 1, 5000)
    assert refs.shape == (5000, 2)
    assert_array_equal(refs[:10], reference_points(far_reward, 1, 10))
    assert_allclose(refs.mean(axis=0), [14, 3], atol=0.1)
    assert_allclose(refs.std(axis=0), [2, 2], atol=0.1)
    quantized = reference_points(QuantizedReward((1.0, 1.0), 0.5), 1, 5000)
    assert_allclose(quantized.std(axis=0), [0.5, 0.5], atol=0.05)


def test_zero_scale_is_base_sampling(tiny_model, sched, far_reward):
    assert_array_equal(grad_guided_samples(tiny_model, sched, far_reward, 0.0, seed=6, n=5),
                       base_sample(tiny_model, sched, 5, seed=6))
    assert_array_equal(grad_guided_sample(tiny_model, sched, far_reward, 0.0, seed=6),
                       base_sample(tiny_model, sched, 1, seed=6)[0])


def test_gradient_guidance_needs_differentiable_reward(tiny_model, sched):
    with pytest.raises(UnsupportedRewardError):
        grad_guided_samples(tiny_model, sched, QuantizedReward((14.0, 3.0)), 5.0, seed=0, n=1)
    with pytest.raises(UnsupportedRewardError):
        guided_samples(tiny_model, sched, QuantizedReward((14.0, 3.0)), GuidanceConfig('GradGuide', scale=5.0), 1, seed=0)
    # Gradient-free selection runs on the same reward.
    assert code_samples(tiny_model, sched, QuantizedReward((14.0, 3.0)), 3, 10, seed=0, n=2).shape == (2, 2)


@pytest.mark.parametrize("exact_gradient", [True, False])
def test_guided_step_shifts_mean_towards_tilted_posterior(sched, exact_gradient):
    m, s = np.array([5.0, 3.0]), 2.0
    denoiser = MixtureDenoiser(GmmSpec((1.0,), (tuple(m),), s))
    spec = GaussianReward((14.0, 3.0), 2.0)
    x = np.array([[0.3, -0.8], [1.5, 0.2]])
    noise = np.zeros((2, sched.T, 2))
    t, scale = 30, 4.0
    _, plain = guided(denoiser, sched, spec, x, t, noise, 0.0)[0]
    _, shifted = guided(denoiser, sched, spec, x, t, noise, scale, exact=exact_gradient)[0]

    a, ab = sched.alpha[t], sched.alpha_bar[t]
    k = np.sqrt(ab) * s**2 / (ab * s**2 + 1 - ab)
    x0 = m + k * (x - np.sqrt(ab) * m)
    jac = k if exact_gradient else 1 / np.sqrt(ab)
    expected = (1 - a) / np.sqrt(a) * scale * jac * (np.asarray(spec.mu) - x0) / spec.sigma**2
    assert_allclose(shifted - plain, expected, rtol=1e-10)


def test_selection_temperature(exact, sched, far_reward):
    greedy = code_samples(exact, sched, far_reward, 4, 10, seed=3, n=10)
    assert_array_equal(code_samples(exact, sched, far_reward, 4, 10, seed=3, n=10, temperature=1e-300), greedy)
    warm = code_samples(exact, sched, far_reward, 4, 10, seed=3, n=10, temperature=5.0)
    assert_array_equal(warm, code_samples(exact, sched, far_reward, 4, 10, seed=3, n=10, temperature=5.0))
    assert not np.array_equal(warm, greedy)


def test_guidance_config():
    assert GuidanceConfig('BoN', N=4).block_size(1000) == 1000
    assert GuidanceConfig('SVDDPM', N=4).block_size(1000) == 1
    assert GuidanceConfig('CoDe', N=4).block_size(1000) == 100
    assert GuidanceConfig('CoDe', N=4).block_size(50) == 50
    assert GuidanceConfig('CoDeEta', N=4, eta=0.6).steps(1000) == 600
    assert GuidanceConfig('BoN', N=4, eta=0.6).steps(1000) == 1000
    assert GuidanceConfig('GradGuide', scale=3.0).block_size(1000) is None
    for kw in (dict(method='DPS'), dict(N=0), dict(B=0), dict(eta=0.0), dict(scale=-1.0), dict(temperature=-0.1)):
        with pytest.raises(ValueError):
            GuidanceConfig(**kw)


def test_dispatch(tiny_model, sched, far_reward):
    n, seed = 4, 12
    assert_array_equal(guided_samples(tiny_model, sched, far_reward, GuidanceConfig('Base'), n, seed),
                       base_sample(tiny_model, sched, n, seed))
    assert_array_equal(guided_samples(tiny_model, sched, far_reward, GuidanceConfig('BoN', N=3), n, seed),
                       bon_samples(tiny_model, sched, far_reward, 3, seed, n))
    assert_array_equal(guided_samples(tiny_model, sched, far_reward, GuidanceConfig('SVDDPM', N=3, seed=99), n, seed),
                       svdd_samples(tiny_model, sched, far_reward, 3, 99, n))
    assert_array_equal(guided_samples(tiny_model, sched, far_reward, GuidanceConfig('CoDe', N=3, B=20), n, seed),
                       code_samples(tiny_model, sched, far_reward, 3, 20, seed, n))
    assert_array_equal(
        guided_samples(tiny_model, sched, far_reward, GuidanceConfig('CoDeEta', N=3, B=5, eta=0.4, x_ref=(14.0, 3.0)), n, seed),
        code_eta_samples(tiny_model, sched, far_reward, 3, 5, 0.4, (14.0, 3.0), seed, n))
    assert_array_equal(
        guided_samples(tiny_model, sched, far_reward, GuidanceConfig('GradGuide', scale=2.0, exact_gradient=False), n, seed),
        grad_guided_samples(tiny_model, sched, far_reward, 2.0, seed, n, exact=False))
    with pytest.raises(ValueError):
        guided_samples(tiny_model, sched, far_reward, GuidanceConfig('Base'), n)


def test_selection_moves_samples_towards_reward(exact, sched, far_reward):
    base = base_sample(exact, sched, 300, seed=100)
    guided_batch = code_samples(exact, sched, far_reward, 8, 10, seed=200, n=300)
    assert win_rate(guided_batch, base, far_reward) > 0.6
    steered = grad_guided_samples(exact, sched, far_reward, 5.0, seed=200, n=300)
    assert win_rate(steered, base, far_reward) > 0.6
