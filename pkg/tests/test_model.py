import dataclasses

import numpy as np
import pytest

from ilasr import tensor as tn
from ilasr.errors import ConfigError, DataFormatError, ShapeError
from ilasr.losses import ctc_loss, greedy_log_prob
from ilasr.model import (TINY_CONFIG, Checkpoint, EwcState, ModelConfig, checkpoint_from_bytes,
                         checkpoint_to_bytes, collate, downsampled_length, forward, init_model,
                         load_checkpoint, save_checkpoint)


def test_init_is_deterministic():
    a, b = init_model(TINY_CONFIG, 5), init_model(TINY_CONFIG, 5)
    assert a.equal_params(b)
    assert not a.equal_params(init_model(TINY_CONFIG, 6))


def test_init_covers_every_parameter_with_finite_values():
    ck = init_model(ModelConfig(), 0)
    assert all(np.all(np.isfinite(v)) for v in ck.params.values())
    assert ck.params["final_ln.g"].tolist() == [1.0] * 32
    assert not np.any(ck.params["fc1.b"])


@pytest.mark.parametrize("change,match", [
    (dict(fc_dims=(10, 5)), "fc_dims must end in M"),
    (dict(d_h=9), "divisible"),
    (dict(conv_layers=((8, 3, 0),)), "stride"),
    (dict(num_classes=1, fc_dims=(10, 1)), "M"),
])
def test_invalid_config_names_constraint(change, match):
    with pytest.raises(ConfigError, match=match):
        init_model(dataclasses.replace(TINY_CONFIG, **change), 0)


@pytest.mark.parametrize("strides,S,K", [((2, 2), 16, 4), ((1,), 7, 7), ((2,), 7, 4), ((2, 2), 1, 1)])
def test_downsampled_length(strides, S, K):
    cfg = dataclasses.replace(TINY_CONFIG, conv_layers=tuple((4, 3, s) for s in strides))
    assert downsampled_length(S, cfg) == K


def test_downsampled_length_monotone():
    ks = [downsampled_length(S, ModelConfig()) for S in range(1, 60)]
    assert all(b >= a for a, b in zip(ks, ks[1:]))


def test_posteriors_are_distributions_and_k_matches():
    ck = init_model(TINY_CONFIG, 1)
    x = np.random.default_rng(0).normal(size=(6, 11)) * 3
    out = forward(ck, x)
    p = out.posteriors.probs
    assert p.shape == (1, downsampled_length(11, TINY_CONFIG), 4)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(p >= 0)
    assert out.feature_map.shape == (1, p.shape[1], TINY_CONFIG.d_h)


def test_zero_weights_give_uniform_posteriors():
    ck = init_model(TINY_CONFIG, 1)
    zeroed = Checkpoint({k: np.zeros_like(v) for k, v in ck.params.items()}, ck.config)
    p = forward(zeroed, np.random.default_rng(1).normal(size=(6, 9))).posteriors.probs
    np.testing.assert_allclose(p, 0.25, atol=1e-15)


def test_padded_batch_matches_single_samples():
    ck = init_model(TINY_CONFIG, 2)
    rng = np.random.default_rng(3)
    xs = [rng.normal(size=(6, S)) for S in (13, 5, 8)]
    x, L = collate(xs)
    batch = forward(ck, x, L)
    for b, xi in enumerate(xs):
        single = forward(ck, xi)
        K = single.log_probs.shape[1]
        assert batch.frame_mask[b].sum() == K
        np.testing.assert_allclose(batch.log_probs.data[b, :K], single.log_probs.data[0], atol=1e-10)
        np.testing.assert_allclose(batch.feature_map.data[b, :K], single.feature_map.data[0], atol=1e-10)


def test_padding_content_does_not_leak():
    ck = init_model(TINY_CONFIG, 2)
    rng = np.random.default_rng(4)
    x, L = collate([rng.normal(size=(6, 12)), rng.normal(size=(6, 4))])
    noisy = x.copy()
    noisy[1, 4:] = rng.normal(size=(8, 6)) * 100
    a, b = forward(ck, x, L), forward(ck, noisy, L)
    np.testing.assert_array_equal(a.log_probs.data, b.log_probs.data)


def test_forward_is_deterministic_and_copy_equal():
    ck = init_model(TINY_CONFIG, 8)
    x = np.random.default_rng(5).normal(size=(6, 10))
    a, b = forward(ck, x), forward(ck.copy(), x)
    assert np.array_equal(a.log_probs.data, b.log_probs.data)
    assert np.array_equal(a.feature_map.data, b.feature_map.data)


def test_forward_rejects_bad_shapes():
    ck = init_model(TINY_CONFIG, 0)
    with pytest.raises(ShapeError, match="minimum length"):
        forward(ck, np.zeros((6, 0)))
    with pytest.raises(ShapeError):
        forward(ck, np.zeros((5, 10)))


def _tiny_objective(ck, x, L, labels):
    def f(name):
        def g(value):
            params = {k: (value if k == name else tn.Tensor(v)) for k, v in ck.params.items()}
            out = forward(ck, x, L, params=params, tap_feature_map=False)
            return ctc_loss(out.posteriors, labels) + 0.1 * greedy_log_prob(out.posteriors).mean()
        return g
    return f


def test_parameter_gradients_pass_finite_differences():
    ck = init_model(TINY_CONFIG, 11)
    rng = np.random.default_rng(12)
    x, L = collate([rng.normal(size=(6, 9)), rng.normal(size=(6, 6))])
    f = _tiny_objective(ck, x, L, [[1, 2, 3], [2]])
    worst = max(tn.finite_diff_check(f(name), v) for name, v in ck.params.items())
    assert worst < 1e-4


# -- checkpoint format -------------------------------------------------------

def _with_ewc(ck):
    ck = ck.copy()
    ck.meta = {"stage": 2, "method": "rbkd_ewc"}
    ck.ewc = EwcState({k: v + 1 for k, v in ck.params.items()},
                      {k: np.abs(v) for k, v in ck.params.items()})
    return ck


@pytest.mark.parametrize("ewc", [False, True])
def test_checkpoint_round_trip(tmp_path, ewc):
    ck = init_model(TINY_CONFIG, 3)
    if ewc:
        ck = _with_ewc(ck)
    path = tmp_path / "m.ilck"
    save_checkpoint(ck, path)
    back = load_checkpoint(path)
    assert back.config == ck.config and back.meta == ck.meta
    assert back.equal_params(ck)
    assert list(back.params) == list(ck.params)
    if ewc:
        for k in ck.params:
            assert np.array_equal(back.ewc.reference[k], ck.ewc.reference[k])
            assert np.array_equal(back.ewc.fisher[k], ck.ewc.fisher[k])
    else:
        assert back.ewc is None
    assert checkpoint_to_bytes(back) == path.read_bytes()


def test_checkpoint_header_layout():
    raw = checkpoint_to_bytes(init_model(TINY_CONFIG, 0))
    assert raw[:4] == b"ILCK"
    assert int.from_bytes(raw[4:8], "little") == 1


def test_checkpoint_bad_magic():
    raw = bytearray(checkpoint_to_bytes(init_model(TINY_CONFIG, 0)))
    raw[:4] = b"XXXX"
    with pytest.raises(DataFormatError, match="bad magic"):
        checkpoint_from_bytes(bytes(raw))


def test_checkpoint_truncation_reports_offset():
    raw = checkpoint_to_bytes(init_model(TINY_CONFIG, 0))
    with pytest.raises(DataFormatError, match="offset"):
        checkpoint_from_bytes(raw[:-5])


def test_checkpoint_shape_mismatch_rejected():
    ck = init_model(TINY_CONFIG, 0)
    ck.params["fc1.b"] = np.zeros(7)
    with pytest.raises(ConfigError, match="fc1.b"):
        checkpoint_from_bytes(checkpoint_to_bytes(ck))
