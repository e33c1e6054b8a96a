import itertools

import numpy as np
import pytest

from difflab import tensorcore as tc
from difflab.model import DenoiserModel, ModelConfig, ModelError, NumericError, embed_time
from difflab.predictor import PredictionType as P


def test_embed_t0_sin_zero_cos_one():
    e = embed_time(0, 32, 100)
    np.testing.assert_array_equal(e[:16], 0.0)
    np.testing.assert_array_equal(e[16:], 1.0)
    assert np.linalg.norm(e) == pytest.approx(np.sqrt(16))


def test_embed_distinct_for_every_pair():
    emb = embed_time(np.arange(1, 101), 32, 100)
    dmin = min(np.linalg.norm(emb[i] - emb[j]) for i, j in itertools.combinations(range(100), 2))
    assert dmin > 0


def test_embed_batch_matches_scalar():
    batch = embed_time(np.array([3, 70]), 8, 100)
    np.testing.assert_array_equal(batch[1], embed_time(70, 8, 100))


def test_embed_odd_dim():
    with pytest.raises(ModelError):
        embed_time(1, 7, 10)


def test_default_architecture_size():
    m = DenoiserModel(ModelConfig())
    assert 30_000 < m.param_count < 45_000
    assert set(m.params) >= {"trunk.0.w", "trunk.2.b", "head.a.w", "head.a.b"}


def test_heads_canonical_order_and_own_params():
    m = DenoiserModel(ModelConfig(heads=("a", "d", "v")))
    assert m.heads == (P.D, P.V, P.A)
    names = {n for pt in m.heads for n in m.head_param_names(pt)}
    assert len(names) == 6 and names <= set(m.params)


def test_zero_heads_output_zero():
    m = DenoiserModel(ModelConfig(heads=("d", "v", "a"), zero_heads=True))
    rng = np.random.default_rng(0)
    out = m.predict(rng.standard_normal((16, 2)), rng.integers(1, 1001, 16))
    for v in out.values():
        np.testing.assert_array_equal(v, 0.0)


def test_identical_rows_identical_outputs():
    m = DenoiserModel(ModelConfig(), np.random.default_rng(1))
    x = np.tile([[0.3, -0.4]], (5, 1))
    out = m.predict(x, np.full(5, 250))[P.A]
    # BLAS micro-kernels may round tail rows differently; a few ulp at most
    np.testing.assert_allclose(out, np.broadcast_to(out[0], out.shape), rtol=1e-14, atol=1e-15)
    again = m.predict(x, np.full(5, 250))[P.A]
    assert again.tobytes() == out.tobytes()


def test_forward_rejects_bad_shapes():
    m = DenoiserModel(ModelConfig())
    with pytest.raises(ModelError):
        m.forward(np.zeros((4, 2)), [1, 2, 3])
    with pytest.raises(ModelError):
        m.forward(np.zeros((4, 3)), [1, 2, 3, 4])


def test_nan_reports_layer():
    m = DenoiserModel(ModelConfig(hidden=(8, 8)))
    m.params["trunk.1.w"].data[0, 0] = np.inf
    with pytest.raises(NumericError) as exc, np.errstate(invalid="ignore", over="ignore"):
        m.forward(np.ones((2, 2)), [1, 2])
    assert exc.value.layer == 1


def test_predict_matches_forward():
    m = DenoiserModel(ModelConfig(heads=("v", "a")), np.random.default_rng(2))
    rng = np.random.default_rng(3)
    x, t = rng.standard_normal((7, 2)), rng.integers(1, 1001, 7)
    taped = m.forward(x, t)
    fast = m.predict(x, t, chunk=3)
    for pt in m.heads:
        np.testing.assert_allclose(taped[pt].data, fast[pt], rtol=1e-13, atol=1e-15)


def _random_config(rng):
    depth = int(rng.integers(1, 4))
    return ModelConfig(
        time_embed_dim=int(rng.choice([2, 4, 6])),
        hidden=tuple(int(h) for h in rng.integers(2, 7, size=depth)),
        heads=tuple(rng.choice(["d", "v", "a"], size=int(rng.integers(1, 4)), replace=False)),
        T=int(rng.integers(5, 200)),
    )


@pytest.mark.parametrize("seed", range(5))
def test_full_model_mse_grad_check(seed):
    rng = np.random.default_rng(seed)
    cfg = _random_config(rng)
    m = DenoiserModel(cfg, rng)
    x = rng.standard_normal((4, 2))
    t = rng.integers(1, cfg.T + 1, size=4)
    targets = {pt: rng.standard_normal((4, 2)) for pt in m.heads}

    def f():
        out = m.forward(x, t)
        loss = None
        for pt in m.heads:
            term = tc.mse(out[pt], targets[pt])
            loss = term if loss is None else tc.add(loss, term)
        return loss

    assert tc.grad_check(f, list(m.params.values())) < 1e-4


def test_state_dict_roundtrip():
    a = DenoiserModel(ModelConfig(hidden=(8,)), np.random.default_rng(0))
    b = DenoiserModel.from_encoded(a.config, a.encode_params())
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()
    with pytest.raises(ModelError):
        DenoiserModel(ModelConfig(hidden=(9,))).load_state_dict(a.state_dict())
