import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from point_transformer import numerics as nx
from point_transformer.attention import self_mha
from point_transformer.numerics import UsageError
from point_transformer.sortnet import SortNetParams, multi_sortnet, sortnet_forward

D, DM = 6, 16


def _setup(n=12, seed=0, **kw):
    rng = np.random.default_rng(seed)
    params = SortNetParams.create("sn", D, DM, 2, rng, encoder_hidden=(8,), radius=0.8, max_samples=4, **kw)
    for bias in params.encoder.biases:
        bias.data[...] = rng.normal(scale=0.1, size=bias.shape)
    pts = rng.uniform(-1, 1, size=(n, D))
    latent = rng.normal(size=(n, DM))
    return params, pts, latent


def test_feature_layout_and_order():
    params, pts, latent = _setup()
    out = sortnet_forward(pts, latent, params, 5)
    assert out.features.shape == (5, DM)
    np.testing.assert_array_equal(out.features.data[:, :D], pts[out.indices])
    np.testing.assert_array_equal(out.features.data[:, D], out.scores)
    assert np.all(np.diff(out.scores) <= 0)


def test_selected_scores_are_the_top_scores():
    params, pts, latent = _setup()
    out = sortnet_forward(pts, latent, params, 4)
    all_scores = params.score(self_mha(latent, params.self_attn)).data[:, 0]
    np.testing.assert_allclose(out.scores, np.sort(all_scores)[::-1][:4], atol=1e-12)


def test_k_equal_n_keeps_every_point():
    params, pts, latent = _setup(n=7)
    out = sortnet_forward(pts, latent, params, 7)
    assert sorted(out.indices.tolist()) == list(range(7))


@pytest.mark.parametrize("k", [0, 13])
def test_bad_k(k):
    params, pts, latent = _setup()
    with pytest.raises(UsageError):
        sortnet_forward(pts, latent, params, k)


def test_latent_shape_mismatch():
    params, pts, latent = _setup()
    with pytest.raises(UsageError):
        sortnet_forward(pts, latent[:5], params, 3)


def test_d_m_too_small_for_layout():
    with pytest.raises(UsageError):
        SortNetParams.create("sn", 6, 7, 1, np.random.default_rng(0))


@settings(max_examples=25, deadline=None)
@given(st.randoms(use_true_random=False))
def test_output_invariant_to_input_order(rnd):
    params, pts, latent = _setup(seed=1)
    perm = np.array(rnd.sample(range(12), 12))
    a = sortnet_forward(pts, latent, params, 4).features.data
    b = sortnet_forward(pts[perm], latent[perm], params, 4).features.data
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_batched_equals_single():
    params, pts, latent = _setup(seed=2)
    single = sortnet_forward(pts, latent, params, 3)
    batched = sortnet_forward(np.stack([pts, pts[::-1]]), np.stack([latent, latent[::-1]]), params, 3)
    np.testing.assert_allclose(batched.features.data[0], single.features.data, atol=1e-12)
    np.testing.assert_allclose(batched.features.data[1], single.features.data, atol=1e-10)


def test_fps_and_random_selection_keep_layout():
    params, pts, latent = _setup(seed=3)
    fps = sortnet_forward(pts, latent, params, 4, selection="fps")
    rnd = sortnet_forward(pts, latent, params, 4, selection="random", rng=np.random.default_rng(0))
    assert fps.features.shape == rnd.features.shape == (4, DM)
    assert len(set(rnd.indices.tolist())) == 4
    with pytest.raises(UsageError):
        sortnet_forward(pts, latent, params, 4, selection="random")
    with pytest.raises(UsageError):
        sortnet_forward(pts, latent, params, 4, selection="bogus")


def test_score_channel_carries_gradient():
    params, pts, latent = _setup(seed=4)
    w = np.zeros((4, DM))
    w[:, D] = 1.0
    with nx.Tape() as tape:
        loss = nx.sum_all(nx.mul(sortnet_forward(pts, latent, params, 4).features, w))
    nx.backward(tape, loss)
    assert np.abs(params.score.weights[-1].grad).sum() > 0
    assert np.abs(params.self_attn.multihead.wq.grad).sum() > 0


def test_sortnet_gradients():
    params, pts, latent = _setup(n=8, seed=5)
    ps = [params.score.weights[0], params.encoder.weights[0], params.encoder.biases[0], params.self_attn.multihead.wv]
    w = np.random.default_rng(6).normal(size=(3, DM))
    err = nx.check_gradients(lambda _: nx.sum_all(nx.mul(sortnet_forward(pts, latent, params, 3).features, w)), ps)
    assert err < 1e-4


def test_multi_sortnet_stacks_in_module_order():
    rng = np.random.default_rng(7)
    _, pts, latent = _setup(seed=7)
    nets = [
        SortNetParams.create(f"sn{i}", D, DM, 2, rng, encoder_hidden=(8,), radius=0.8, max_samples=4)
        for i in range(3)
    ]
    stacked, parts = multi_sortnet(pts, latent, nets, 2)
    assert stacked.shape == (6, DM)
    for i, p in enumerate(parts):
        np.testing.assert_array_equal(stacked.data[2 * i : 2 * i + 2], p.features.data)
    with pytest.raises(UsageError):
        multi_sortnet(pts, latent, [], 2)
