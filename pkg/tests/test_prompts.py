import numpy as np
import pytest

from asp_fscil import tensor as T
from asp_fscil.exceptions import ConfigError, ContractError, DimensionError
from asp_fscil.prompts import (EncoderHeads, Hyperparams, PromptAverage, TipBlock,
                               assemble_prompts, blend_average, compute_p_avg, ema_update,
                               encode_mean, encode_sigma, init_tip, make_tsp, perturb)

LAYERS = (0, 1)


@pytest.fixture
def heads():
    return EncoderHeads(LAYERS, 3, 16, hidden=8, rng=T.make_rng(0, 3))


@pytest.fixture
def tip():
    return init_tip(LAYERS, 3, 16, T.make_rng(0, 4))


@pytest.mark.parametrize("kwargs", [dict(alpha=1.5), dict(beta=-0.1), dict(prompt_length=0),
                                    dict(input_noise=-1.0)])
def test_hyperparams_validation(kwargs):
    with pytest.raises(ConfigError):
        Hyperparams(**kwargs)


def test_tied_tip_repeats_one_vector(tip):
    rows = tip.rows(0)
    assert rows.shape == (3, 16)
    np.testing.assert_array_equal(rows[0], rows[2])
    assert tip.tokens(1, 5).shape == (5, 3, 16)
    assert tip.parameters()[0].shape == (16,)


def test_untied_tip_has_distinct_rows():
    tip = init_tip(LAYERS, 3, 16, T.make_rng(0, 4), tied=False)
    assert tip.parameters()[0].shape == (3, 16)
    assert not np.array_equal(tip.rows(0)[0], tip.rows(0)[1])


def test_tied_tip_gradient_sums_positions(tip):
    target = np.random.default_rng(0).standard_normal((2, 3, 16)).astype(np.float32)
    T.backward(T.dot(tip.tokens(0, 2), T.Tensor(target)))
    np.testing.assert_allclose(tip.params[0].grad, target.sum(axis=(0, 1)), rtol=1e-5)


def test_tip_needs_source():
    with pytest.raises(ConfigError):
        TipBlock(LAYERS, 3, 16)


def test_encoder_shapes_and_unit_variance_at_init(heads, tip, rng):
    f = T.Tensor(rng.standard_normal((4, 16)).astype(np.float32))
    mus = encode_mean(f, tip, heads)
    sig = encode_sigma(f, tip, heads)
    assert mus[0].shape == (4, 3, 16)
    assert sig[1].shape == (4, 48)
    np.testing.assert_array_equal(sig[0].data, 1.0)


def test_encoder_depends_on_tip(heads, tip, rng):
    f = T.Tensor(rng.standard_normal((4, 16)).astype(np.float32))
    a = encode_mean(f, tip, heads)[0].data
    tip.params[0].data = tip.params[0].data + 1.0
    assert not np.allclose(a, encode_mean(f, tip, heads)[0].data)


def test_encoder_without_tip(rng):
    heads = EncoderHeads(LAYERS, 3, 16, hidden=8, use_tip=False, rng=T.make_rng(0, 3))
    assert heads.in_dim == 16
    out = encode_mean(T.Tensor(rng.standard_normal((2, 16))), None, heads)
    assert out[1].shape == (2, 3, 16)


def test_encoder_input_checks(heads, tip):
    with pytest.raises(DimensionError):
        encode_mean(T.Tensor(np.ones((2, 8))), tip, heads)
    with pytest.raises(ContractError):
        encode_mean(T.Tensor(np.ones((2, 16))), None, heads)


def test_perturb_modes(rng):
    x = np.zeros((2, 4, 4, 3), np.float32)
    assert perturb(x, 0.1, None, training=False) is x
    noisy = perturb(x, 0.1, T.make_rng(0), training=True)
    assert noisy.dtype == np.float32
    assert 0.05 < noisy.std() < 0.15


def _batches(rng, n=5):
    return [{l: rng.standard_normal((n, 3, 16)).astype(np.float32) for l in LAYERS}]


def test_compute_p_avg_is_mean(rng):
    b = _batches(rng)
    avg = compute_p_avg(b)
    np.testing.assert_allclose(avg.blocks[0], b[0][0].astype(np.float64).mean(0), atol=1e-6)
    assert avg.sample_count == 5
    with pytest.raises(ContractError):
        compute_p_avg([{0: np.zeros((0, 3, 16))}])


def test_ema_beta_one_is_identity(rng):
    avg = compute_p_avg(_batches(rng))
    new = ema_update(avg, _batches(rng), beta=1.0)
    for l in LAYERS:
        assert new.blocks[l].tobytes() == avg.blocks[l].tobytes()
    assert new.task_index == avg.task_index + 1


def test_ema_blend_value(rng):
    avg = compute_p_avg(_batches(rng))
    b = _batches(rng)
    new = ema_update(avg, b, beta=0.9)
    want = 0.9 * avg.blocks[0].astype(np.float64) + 0.1 * b[0][0].astype(np.float64).mean(0)
    np.testing.assert_allclose(new.blocks[0], want, atol=1e-7)


def test_blend_shape_and_range_checks(rng):
    avg = compute_p_avg(_batches(rng))
    with pytest.raises(DimensionError):
        blend_average(avg, {0: np.zeros((2, 16)), 1: np.zeros((2, 16))}, 0.5, 1)
    with pytest.raises(ConfigError):
        ema_update(avg, _batches(rng), beta=1.5)


def test_make_tsp_alpha_endpoints(rng):
    mu = rng.standard_normal((4, 3, 16)).astype(np.float32)
    p = rng.standard_normal((3, 16)).astype(np.float32)
    out = make_tsp(mu, p, 1.0)
    assert np.broadcast_to(p, mu.shape).tobytes() == out.tobytes()
    assert make_tsp(mu, p, 0.0).tobytes() == mu.tobytes()
    np.testing.assert_allclose(make_tsp(mu, p, 0.3), 0.3 * p + 0.7 * mu, atol=1e-7)
    t = make_tsp(T.Tensor(mu), p, 0.3)
    np.testing.assert_allclose(t.data, 0.3 * p + 0.7 * mu, atol=1e-7)
    with pytest.raises(DimensionError):
        make_tsp(mu, np.zeros((2, 16)), 0.5)
    with pytest.raises(ConfigError):
        make_tsp(mu, p, 1.2)


def test_assemble_prompts():
    a, b = T.Tensor(np.zeros((2, 3, 16))), T.Tensor(np.ones((2, 3, 16)))
    out = assemble_prompts(a, b)
    assert out.shape == (2, 6, 16)
    np.testing.assert_array_equal(out.data[:, 3:], 1.0)
    assert assemble_prompts(None, b) is b
    with pytest.raises(ContractError):
        assemble_prompts(None, None)
    with pytest.raises(DimensionError):
        assemble_prompts(a, T.Tensor(np.ones((2, 3, 8))))


def test_prompt_average_copy_is_deep(rng):
    avg = compute_p_avg(_batches(rng))
    c = avg.copy()
    c.blocks[0][:] = 0
    assert avg.blocks[0].any()
    assert isinstance(c, PromptAverage)
