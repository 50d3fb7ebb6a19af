import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdvoc.audio import MelSpectrogram, Waveform
from hdvoc.diffusion import (
    FAST_INFERENCE_BETAS,
    AdaptivePrior,
    NoiseSchedule,
    NonzeroFinalNoiseError,
    align_steps,
    compute_prior,
    make_inference_schedule,
    make_training_schedule,
    posterior_step,
    q_sample,
    reverse_chain,
    sample_prior_noise,
    weighted_loss,
    weighted_loss_grad,
)
from hdvoc.errors import InvalidParameterError, LengthMismatchError

from oracles import forward_chain, gaussian_moments_through_chain, gaussian_mmse_eps


# -- schedules -----------------------------------------------------------------------


def test_training_schedule_products():
    sched = make_training_schedule(50, 1e-4, 0.05)
    brute = 1.0
    for b in np.linspace(1e-4, 0.05, 50):
        brute *= 1 - b
    assert sched.T == 50
    assert sched.alpha_bar(50) == pytest.approx(brute, rel=1e-12)
    assert sched.alpha_bar(50) == pytest.approx(0.27967250019, rel=1e-9)
    assert sched.alpha_bar(1) == 1 - sched.beta(1)
    for t in range(2, 51):
        assert sched.alpha_bar(t) == pytest.approx(sched.alpha_bar(t - 1) * sched.alpha(t), rel=1e-14)
    assert np.all(np.diff(sched.alpha_bars) < 0)


@pytest.mark.parametrize("args", [(1, 1e-4, 0.05), (50, 0.05, 1e-4), (50, 0.0, 0.05), (50, 1e-4, 1.0)])
def test_training_schedule_rejects_bad_range(args):
    with pytest.raises(InvalidParameterError):
        make_training_schedule(*args)


def test_fast_inference_schedule():
    sched = make_inference_schedule(FAST_INFERENCE_BETAS)
    assert sched.T == 6
    assert sched.alpha_bar(6) == pytest.approx(np.prod([1 - b for b in FAST_INFERENCE_BETAS]), rel=1e-14)
    assert sched.alpha_bar(6) == pytest.approx(0.37578621762, rel=1e-9)
    assert make_inference_schedule([0.5]).alpha_bar(1) == 0.5


def test_inference_schedule_rejects_out_of_range():
    with pytest.raises(InvalidParameterError):
        make_inference_schedule([0.1, 1.0])
    with pytest.raises(InvalidParameterError):
        make_inference_schedule([])


def test_alpha_bar_zero_is_one_and_sigma_one_is_zero():
    sched = make_inference_schedule()
    assert sched.alpha_bar(0) == 1.0
    assert sched.sigma2(1) == 0.0
    with pytest.raises(InvalidParameterError):
        sched.alpha_bar(7)


def test_align_steps_brackets_noise_levels():
    train, infer = make_training_schedule(), make_inference_schedule()
    steps = align_steps(train, infer)
    assert steps[0] == pytest.approx(1.0)
    assert np.all(np.diff(steps) > 0)
    assert steps[-1] <= train.T
    root = np.sqrt(train.alpha_bars)
    for s, t in enumerate(steps):
        lo = int(np.floor(t))
        frac = t - lo
        if lo < train.T:
            interp = (1 - frac) * root[lo - 1] + frac * root[lo]
        else:
            interp = root[-1]
        assert interp == pytest.approx(np.sqrt(infer.alpha_bar(s + 1)), rel=1e-12)


def test_align_steps_identity_when_schedules_match():
    train = make_training_schedule(20, 1e-3, 0.1)
    assert np.allclose(align_steps(train, train), np.arange(1, 21))


# -- forward process --------------------------------------------------------------------


def test_q_sample_substitution():
    sched = NoiseSchedule.from_betas([0.75])
    x = q_sample(np.ones(10), 1, np.zeros(10), sched)
    assert np.allclose(x, 0.5)
    e = np.random.default_rng(0).standard_normal(10)
    assert np.allclose(q_sample(np.zeros(10), 1, e, sched), np.sqrt(0.75) * e)


def test_q_sample_waveform_passthrough_and_errors():
    sched = make_training_schedule()
    out = q_sample(Waveform(np.zeros(4), 8000), 3, np.ones(4), sched)
    assert isinstance(out, Waveform) and out.sample_rate == 8000
    with pytest.raises(InvalidParameterError):
        q_sample(np.zeros(4), 0, np.zeros(4), sched)
    with pytest.raises(InvalidParameterError):
        q_sample(np.zeros(4), 51, np.zeros(4), sched)
    with pytest.raises(LengthMismatchError):
        q_sample(np.zeros(4), 1, np.zeros(5), sched)


@pytest.mark.parametrize("seed", range(10))
def test_closed_form_matches_iterated_chain(seed):
    rng = np.random.default_rng(seed)
    sched = make_training_schedule(50)
    x0 = rng.uniform(-1, 1, 256)
    noises = rng.standard_normal((50, 256))
    for t in (1, 7, 25, 50):
        chained = forward_chain(x0, noises, sched, t)
        eps_eq = forward_chain(np.zeros_like(x0), noises, sched, t) / np.sqrt(1 - sched.alpha_bar(t))
        closed = q_sample(x0, t, eps_eq, sched)
        assert np.max(np.abs(closed - chained) / np.maximum(np.abs(chained), 1e-12)) < 1e-6


# -- reverse process ------------------------------------------------------------------------


def test_posterior_step_without_noise_or_prediction():
    sched = make_inference_schedule()
    x = np.random.default_rng(0).standard_normal(8)
    assert np.allclose(posterior_step(x, np.zeros(8), 4, sched, np.zeros(8)), x / np.sqrt(sched.alpha(4)))


def test_posterior_step_final_must_be_deterministic():
    sched = make_inference_schedule()
    with pytest.raises(NonzeroFinalNoiseError):
        posterior_step(np.zeros(3), np.zeros(3), 1, sched, np.ones(3))
    posterior_step(np.zeros(3), np.zeros(3), 1, sched, np.zeros(3))


def test_posterior_step_adds_scaled_noise():
    sched = make_inference_schedule()
    x, e, z = np.random.default_rng(2).standard_normal((3, 16))
    with_z = posterior_step(x, e, 3, sched, z)
    without = posterior_step(x, e, 3, sched, None)
    assert np.allclose(with_z - without, np.sqrt(sched.sigma2(3)) * z)


@pytest.mark.parametrize("beta", [0.01, 0.3, 0.9])
def test_single_step_perfect_denoiser_inverts(beta):
    sched = NoiseSchedule.from_betas([beta])
    rng = np.random.default_rng(1)
    x0, eps = rng.standard_normal((2, 100))
    x1 = q_sample(x0, 1, eps, sched)
    assert np.max(np.abs(posterior_step(x1, eps, 1, sched, np.zeros(100)) - x0)) < 1e-6


def test_gaussian_oracle_sampler_matches_moments():
    m, s = 0.3, 0.2
    sched = make_training_schedule(50)
    rng = np.random.default_rng(0)
    n = 100_000

    oracle = lambda x, t: gaussian_mmse_eps(x, sched.alpha_bar(t), m, s**2)
    out = reverse_chain(rng.standard_normal(n), oracle, sched, lambda: rng.standard_normal(n))
    mu, var = gaussian_moments_through_chain(sched, m, s**2)
    assert abs(out.mean() - mu) < 3 * np.sqrt(var / n)
    assert abs(out.var(ddof=1) - var) < 3 * var * np.sqrt(2 / (n - 1))


# -- prior ------------------------------------------------------------------------------------


def _mel(values, hop=100):
    values = np.asarray(values, dtype=np.float64)
    return MelSpectrogram(values, values.shape[1], hop, 1024, 8000)


def test_prior_constant_mel_is_one():
    prior = compute_prior(_mel(np.full((7, 80), 2.0)), floor=0.1)
    assert np.all(prior.sigma2 == 1.0)
    assert len(prior) == 7 * 100


def test_prior_loud_frame_among_silence():
    values = np.full((5, 80), np.log(1e-5))
    values[2] = np.log(10.0)
    prior = compute_prior(_mel(values, hop=3), floor=0.1)
    assert prior.frame_sigma2.tolist() == [0.1, 0.1, 1.0, 0.1, 0.1]
    assert prior.sigma2.tolist() == [0.1] * 6 + [1.0] * 3 + [0.1] * 6


@settings(max_examples=30, deadline=None)
@given(shift=st.floats(-20, 20), seed=st.integers(0, 1000))
def test_prior_invariant_to_power_scaling(shift, seed):
    values = np.random.default_rng(seed).uniform(-5, 5, (6, 10))
    a = compute_prior(_mel(values)).sigma2
    b = compute_prior(_mel(values + shift)).sigma2
    assert np.allclose(a, b, rtol=1e-12)


def test_prior_bounds_and_hop_override():
    values = np.random.default_rng(4).uniform(-12, 3, (9, 80))
    prior = compute_prior(_mel(values), floor=0.1, hop=25)
    assert prior.sigma2.min() >= 0.1 and prior.sigma2.max() == 1.0
    assert len(prior) == 9 * 25
    assert np.array_equal(prior.with_hop(100).sigma2, compute_prior(_mel(values)).sigma2)
    with pytest.raises(InvalidParameterError):
        compute_prior(_mel(values), floor=1.5)


def test_prior_noise_variance_unit():
    prior = AdaptivePrior(np.ones(1_000_000), np.ones(10_000), 100)
    draws = sample_prior_noise(prior, np.random.default_rng(11))
    assert abs(draws.var() - 1.0) < 0.01
    assert abs(draws.mean()) < 0.005


def test_prior_noise_variance_floor():
    prior = AdaptivePrior(np.full(1_000_000, 0.1), np.full(10_000, 0.1), 100)
    draws = sample_prior_noise(prior, np.random.default_rng(12))
    assert abs(draws.var() - 0.1) < 0.001


def test_prior_noise_reproducible():
    prior = AdaptivePrior(np.full(50, 0.5), np.full(5, 0.5), 10)
    a = sample_prior_noise(prior, np.random.default_rng(3))
    b = sample_prior_noise(prior, np.random.default_rng(3))
    assert np.array_equal(a, b)


# -- loss ---------------------------------------------------------------------------------------


def test_weighted_loss_examples():
    eps = np.array([1.0, 2.0, 3.0])
    assert weighted_loss(eps, eps, np.ones(3)) == 0.0
    assert weighted_loss(np.array([1.0, 2.0]), np.zeros(2), np.array([1.0, 4.0])) == 1.0
    rng = np.random.default_rng(0)
    e, h = rng.standard_normal((2, 64))
    assert weighted_loss(e, h, np.ones(64)) == pytest.approx(np.mean((e - h) ** 2), rel=1e-14)


def test_weighted_loss_length_mismatch():
    with pytest.raises(LengthMismatchError):
        weighted_loss(np.zeros(3), np.zeros(4), np.ones(3))
    with pytest.raises(LengthMismatchError):
        weighted_loss(np.zeros(3), np.zeros(3), np.ones(2))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_weighted_loss_nonnegative_zero_iff_equal(seed):
    rng = np.random.default_rng(seed)
    e, h = rng.standard_normal((2, 32))
    s2 = rng.uniform(0.1, 1.0, 32)
    assert weighted_loss(e, h, s2) > 0
    assert weighted_loss(e, e, s2) == 0


def test_weighted_loss_grad_matches_finite_differences():
    rng = np.random.default_rng(9)
    e, h = rng.standard_normal((2, 12))
    s2 = rng.uniform(0.1, 1, 12)
    g = weighted_loss_grad(e, h, s2)
    fd = np.empty(12)
    for i in range(12):
        d = np.zeros(12)
        d[i] = 1e-6
        fd[i] = (weighted_loss(e, h + d, s2) - weighted_loss(e, h - d, s2)) / 2e-6
    assert np.allclose(g, fd, rtol=1e-6, atol=1e-9)
