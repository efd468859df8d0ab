import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dnet.core import ShapeError, Tensor, check_gradients, mul, reduce_sum
from dnet.nn import Init
from dnet.salience import (
    ChannelMixerWeights,
    ConvBlockBody,
    DLKBody,
    SalienceWeights,
    channel_mixer_forward,
    salience_forward,
)
from dnet.training import softmax


def rand(shape, seed=0, dtype=np.float64):
    return Tensor(np.random.default_rng(seed).standard_normal(shape).astype(dtype))


def test_mixer_zero_projections_is_identity():
    w = ChannelMixerWeights.init(4, Init(0))
    w.expand.fill_(0.0)
    w.contract.fill_(0.0)
    x = rand((1, 4, 3, 3, 3), dtype=np.float32)
    np.testing.assert_array_equal(channel_mixer_forward(x, w, "eval").numpy(), x.numpy())


def test_mixer_hidden_width():
    w = ChannelMixerWeights.init(12, Init(0))
    assert w.expansion == 4
    assert w.expand.spec.out_channels == 48
    assert w.dw3.spec.depthwise and w.dw3.spec.groups == 48


@settings(max_examples=20, deadline=None)
@given(c=st.integers(1, 5), m=st.integers(1, 4), side=st.integers(1, 4), seed=st.integers(0, 999))
def test_mixer_preserves_shape(c, m, side, seed):
    x = rand((1, c, side, side, side), seed)
    assert channel_mixer_forward(x, ChannelMixerWeights.init(c, Init(seed), m), "eval").shape == x.shape


def test_mixer_train_mode_is_reproducible_and_eval_has_no_dropout():
    w = ChannelMixerWeights.init(4, Init(1), dropout_rates=(0.3, 0.3))
    x = rand((1, 4, 3, 3, 3), 2, np.float32)
    a = channel_mixer_forward(x, w, "train", seed=9).numpy()
    b = channel_mixer_forward(x, w, "train", seed=9).numpy()
    np.testing.assert_array_equal(a, b)
    e1 = channel_mixer_forward(x, w, "eval", seed=1).numpy()
    e2 = channel_mixer_forward(x, w, "eval", seed=2).numpy()
    np.testing.assert_array_equal(e1, e2)


def test_mixer_rejects_bad_expansion():
    with pytest.raises(ValueError):
        ChannelMixerWeights.init(4, Init(0), expansion=0)


def test_salience_output_extents():
    w = SalienceWeights.init(1, 8, 3, Init(0))
    out = salience_forward(rand((1, 1, 8, 8, 8), dtype=np.float32), rand((1, 8, 8, 8, 8), 1, np.float32), w)
    assert out.shape == (1, 3, 8, 8, 8)


def test_zero_head_gives_uniform_probabilities():
    w = SalienceWeights.init(1, 4, 3, Init(0))
    w.head.fill_(0.0)
    logits = salience_forward(rand((1, 1, 4, 4, 4)), rand((1, 4, 4, 4, 4), 1), w).numpy()
    assert not np.any(logits)
    np.testing.assert_allclose(softmax(logits), 1 / 3)


def test_salience_rejects_resolution_mismatch():
    w = SalienceWeights.init(1, 4, 2, Init(0))
    with pytest.raises(ShapeError, match="resolution"):
        salience_forward(rand((1, 1, 8, 8, 8)), rand((1, 4, 4, 4, 4)), w)


@pytest.mark.parametrize("body,cls,key", [("mixer", ChannelMixerWeights, "mixer"),
                                          ("convblock", ConvBlockBody, "convblock"),
                                          ("dlk", DLKBody, "dlk")])
def test_alternative_bodies(body, cls, key):
    w = SalienceWeights.init(1, 4, 2, Init(0), body=body)
    assert isinstance(w.body, cls)
    assert any(p.startswith(f"{key}.") for p, _ in w.named_parameters())
    out = salience_forward(rand((1, 1, 4, 4, 4)), rand((1, 4, 4, 4, 4), 1), w)
    assert out.shape == (1, 2, 4, 4, 4)


def test_unknown_body_is_rejected():
    with pytest.raises(ValueError):
        SalienceWeights.init(1, 4, 2, Init(0), body="attention")


def test_gradcheck_channel_mixer():
    w = ChannelMixerWeights.init(2, Init(3, dtype=np.float64), expansion=2)
    x = rand((2, 2, 3, 3, 3), 4)
    tensors = dict(w.named_parameters(), x=x)
    results = check_gradients(lambda: reduce_sum(channel_mixer_forward(x, w, "train")), tensors)
    assert all(r.passed for r in results), [(r.name, r.rel_error) for r in results]


def test_gradcheck_salience():
    w = SalienceWeights.init(1, 4, 2, Init(5, dtype=np.float64))
    image, dec = rand((2, 1, 4, 4, 4), 6), rand((2, 4, 4, 4, 4), 7)
    r = np.random.default_rng(8).standard_normal((2, 2, 4, 4, 4))
    tensors = dict(w.named_parameters(), image=image, decoder_out=dec)

    def loss():
        return reduce_sum(mul(salience_forward(image, dec, w, "train"), Tensor(r)))

    results = check_gradients(loss, tensors, max_entries=24)
    assert all(r.passed for r in results), [(r.name, r.rel_error) for r in results if not r.passed]
