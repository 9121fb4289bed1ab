import numpy as np
import pytest

from flsim.data import ClientSpec, ChunkDataset, generate_client_data
from flsim.errors import ClientSkip, ConfigError, IncompatibleParamsError, ProtocolError
from flsim.model import ParamSet, SplitModel, build_model, full_params, load_base, split_params
from flsim.strategies import (ClientUpdate, Hyper, aggregate_weighted, client_update_fedavg,
                              client_update_fedmetaper, client_update_fedper, client_update_perfedavg,
                              meta_batches, meta_gradient, network_grad_fn, perfedavg_meta_gradient, personalize,
                              server_round_fedper)
from flsim.tensor_nn import (Batch, dense, flatten, flatten_params, init_params, loss_and_grad, loss_only, relu,
                             sgd_step, unflatten_like, validate_specs)
from conftest import bitwise_equal
from oracles import brute_hessian


def _upd(cid, value, n, tag="full", dtype=np.float64):
    return ClientUpdate(cid, ParamSet({"0.weight": np.array(value, dtype=dtype)}, tag), n, 0.0)


# aggregation

def test_aggregate_examples():
    assert aggregate_weighted([_upd(1, [2.0], 1)]).entries["0.weight"].tolist() == [2.0]
    assert aggregate_weighted([_upd(1, [2.0], 1), _upd(2, [4.0], 1)]).entries["0.weight"].tolist() == [3.0]
    assert aggregate_weighted([_upd(1, [1.0], 1), _upd(2, [3.0], 3)]).entries["0.weight"].tolist() == [2.5]


def test_aggregate_table2_weights():
    ups = [_upd(1, [1.0], 668, "base"), _upd(2, [2.0], 1960, "base"), _upd(3, [3.0], 972, "base")]
    out = server_round_fedper(ParamSet({"0.weight": np.zeros(1)}, "base"), ups)
    assert abs(out.entries["0.weight"][0] - 7504 / 3600) < 1e-12


def test_aggregate_single_update_bitwise():
    m = build_model("mini", 0, np.float64)
    out = aggregate_weighted([ClientUpdate(4, full_params(m), 17, 0.0)])
    assert out.bitwise_equal(full_params(m))


@pytest.mark.parametrize("n_clients", [2, 3, 5])
def test_aggregate_idempotent(n_clients):
    m = build_model("mini", 1, np.float64)
    ups = [ClientUpdate(i, full_params(m).copy(), 7 * i + 3, 0.0) for i in range(1, n_clients + 1)]
    assert aggregate_weighted(ups).bitwise_equal(full_params(m))


@pytest.mark.parametrize("dtype,tol", [(np.float64, 0.0), (np.float32, 1e-6)])
def test_aggregate_count_scale_invariance(dtype, tol):
    rng = np.random.default_rng(0)
    payloads = [rng.normal(size=(4, 5)).astype(dtype) for _ in range(3)]
    counts = [668, 1960, 972]
    ref = aggregate_weighted([ClientUpdate(i, ParamSet({"0.weight": p}, "full"), n, 0.0)
                              for i, (p, n) in enumerate(zip(payloads, counts), 1)]).entries["0.weight"]
    for k in (2, 3, 7, 1000):
        out = aggregate_weighted([ClientUpdate(i, ParamSet({"0.weight": p}, "full"), n * k, 0.0)
                                  for i, (p, n) in enumerate(zip(payloads, counts), 1)]).entries["0.weight"]
        if tol == 0:
            assert out.tobytes() == ref.tobytes()
        else:
            np.testing.assert_allclose(out, ref, rtol=tol)


def test_aggregate_order_independent():
    ups = [_upd(3, [1.0], 5), _upd(1, [0.3], 2), _upd(2, [7.0], 11)]
    a = aggregate_weighted(ups).entries["0.weight"]
    b = aggregate_weighted(ups[::-1]).entries["0.weight"]
    assert a.tobytes() == b.tobytes()


def test_aggregate_errors():
    with pytest.raises(ProtocolError):
        aggregate_weighted([_upd(1, [1.0], 1, "base"), _upd(2, [1.0], 1, "full")])
    with pytest.raises(ProtocolError):
        aggregate_weighted([_upd(1, [1.0], 1), _upd(2, [1.0, 2.0], 1)])
    with pytest.raises(ProtocolError):
        aggregate_weighted([])
    with pytest.raises(ProtocolError):
        server_round_fedper(ParamSet({"0.weight": np.zeros(1)}, "base"), [_upd(1, [1.0], 1, "full")])


# meta-gradient

def _quadratic_grad(params, batch):
    return {"w": params["w"].copy()}  # f = w^2 / 2 on every batch


def test_quadratic_oracle():
    w = {"w": np.array([1.0])}
    full = meta_gradient(_quadratic_grad, w, None, None, 0.1, "full_hvp")
    first = meta_gradient(_quadratic_grad, w, None, None, 0.1, "first_order")
    assert abs(full["w"][0] - 0.81) < 1e-12
    assert abs(first["w"][0] - 0.9) < 1e-12


def test_alpha_zero_is_query_gradient():
    rng = np.random.default_rng(0)
    w = {"w": rng.normal(size=3)}
    A = rng.normal(size=(3, 3))
    grad_fn = lambda p, b: {"w": (A @ A.T) @ p["w"] * b}
    for mode in ("full_hvp", "first_order"):
        out = meta_gradient(grad_fn, w, 2.0, 3.0, 0.0, mode)
        np.testing.assert_array_equal(out["w"], grad_fn(w, 3.0)["w"])
    with pytest.raises(ConfigError):
        meta_gradient(grad_fn, w, 2.0, 3.0, -0.1, "first_order")


def _tiny_net():
    specs, _ = validate_specs([flatten(), dense(3, 3), relu(), dense(3, 2)], (1, 1, 3))
    rng = np.random.default_rng(11)
    params = init_params(specs, rng, np.float64)
    params = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in params.items()}
    batch = lambda n: Batch(rng.normal(size=(n, 1, 1, 3)), rng.integers(0, 2, n))
    return specs, params, batch(8), batch(8)


def test_hvp_matches_brute_hessian():
    specs, params, support, query = _tiny_net()
    assert flatten_params(params).size == 20
    model = SplitModel(specs, params, 1)
    alpha = 0.05
    out = perfedavg_meta_gradient(model, support, query, alpha, "full_hvp")
    grad_fn = network_grad_fn(model)
    g_s = grad_fn(params, support)
    v = flatten_params(grad_fn(sgd_step(params, g_s, alpha), query))
    hv_impl = (v - flatten_params(out)) / alpha

    def flat_grad(theta):
        return flatten_params(grad_fn(unflatten_like(theta, params), support))

    H = brute_hessian(flat_grad, flatten_params(params), h=1e-5)
    hv_ref = H @ v
    rel = np.linalg.norm(hv_impl - hv_ref) / np.linalg.norm(hv_ref)
    assert rel < 1e-3


# client updates

@pytest.fixture
def setting(toy_client):
    return build_model("mini", 3, np.float32), toy_client


def _query_batch_oracle(model, params, data, hyper, seed, names):
    """Plain SGD over the query halves of the meta-batch schedule."""
    rng = np.random.default_rng(seed)
    for _ in range(hyper.local_epochs):
        for _, q in meta_batches(len(data), hyper.batch_size, rng):
            _, g = loss_and_grad(params, model.specs, Batch(data.inputs[q], data.labels[q]))
            params = sgd_step(params, {k: g[k] for k in names}, hyper.lr_local)
    return params


def test_fedavg_zero_lr_identity(setting):
    model, data = setting
    up = client_update_fedavg(model, data, Hyper(lr_local=0.0), seed=1)
    assert bitwise_equal(up.payload.entries, model.params)
    assert up.num_samples == len(data)


def test_fedavg_single_full_batch_step(setting):
    model, data = setting
    up = client_update_fedavg(model, data, Hyper(local_epochs=1, batch_size=len(data)), seed=1)
    _, g = loss_and_grad(model.params, model.specs, Batch(data.inputs, data.labels))
    expected = sgd_step(model.params, g, 0.05)
    for k in expected:
        np.testing.assert_allclose(up.payload.entries[k], expected[k], rtol=1e-5, atol=1e-7)


def test_fedavg_deterministic(setting):
    model, data = setting
    a = client_update_fedavg(model, data, Hyper(), seed=4, client_id=1)
    b = client_update_fedavg(model, data, Hyper(), seed=4, client_id=2)
    assert a.payload.bitwise_equal(b.payload)
    c = client_update_fedavg(model, data, Hyper(), seed=5)
    assert not a.payload.bitwise_equal(c.payload)


def test_fedavg_empty_data_skips(setting):
    model, data = setting
    with pytest.raises(ClientSkip):
        client_update_fedavg(model, data.subset([]), Hyper(), seed=1)


def test_fedper_wire_and_zero_lr(setting):
    model, data = setting
    base, personal = split_params(model)
    up, pers = client_update_fedper(model, base, data, Hyper(lr_local=0.0), seed=1, client_id=1)
    assert up.payload.partition_tag == "base"
    assert up.payload.names() == ["1.weight", "1.bias", "3.weight", "3.bias"]
    assert up.payload.bitwise_equal(base) and pers.bitwise_equal(personal)
    up, pers = client_update_fedper(model, base, data, Hyper(), seed=1, client_id=1)
    assert all(int(k.split(".")[0]) < model.split_index for k in up.payload.names())


def test_fedper_personal_diverges(setting):
    model, _ = setting
    base, _ = split_params(model)
    d1 = generate_client_data(ClientSpec(1, 20, 20), (16, 8, 8), 1)
    d2 = generate_client_data(ClientSpec(2, 30, 10), (16, 8, 8), 2)
    _, p1 = client_update_fedper(model, base, d1, Hyper(), seed=1, client_id=1)
    _, p2 = client_update_fedper(model, base, d2, Hyper(), seed=1, client_id=2)
    assert max(np.abs(p1.entries[k] - p2.entries[k]).max() for k in p1.entries) > 0


def test_fedper_base_mismatch(setting):
    model, data = setting
    base, personal = split_params(model)
    with pytest.raises(IncompatibleParamsError):
        client_update_fedper(model, personal, data, Hyper(), seed=1)


def test_perfedavg_reduces_to_fedavg_on_query_batches(setting):
    model, data = setting
    hyper = Hyper(lr_meta=0.0, hessian_mode="first_order", batch_size=8)
    up = client_update_perfedavg(model, full_params(model), data, hyper, seed=7)
    expected = _query_batch_oracle(model, dict(model.params), data, hyper, 7, list(model.params))
    assert bitwise_equal(up.payload.entries, expected)


def test_perfedavg_identity_and_replay(setting):
    model, data = setting
    up = client_update_perfedavg(model, full_params(model), data, Hyper(lr_local=0.0, batch_size=8), seed=2)
    assert bitwise_equal(up.payload.entries, model.params)
    h = Hyper(hessian_mode="full_hvp", batch_size=8, local_epochs=1)
    a = client_update_perfedavg(model, full_params(model), data, h, seed=3)
    b = client_update_perfedavg(model, full_params(model), data, h, seed=3)
    assert a.payload.bitwise_equal(b.payload)
    assert not a.payload.bitwise_equal(full_params(model))


def test_perfedavg_small_client_skips(setting):
    model, data = setting
    with pytest.raises(ClientSkip, match="2 \\* batch_size"):
        client_update_perfedavg(model, full_params(model), data.subset(range(10)), Hyper(batch_size=8), seed=1)


def test_fedmetaper_reduces_to_fedper_on_query_batches(setting):
    model, data = setting
    base, _ = split_params(model)
    hyper = Hyper(lr_meta=0.0, hessian_mode="first_order", batch_size=8)
    up, pers = client_update_fedmetaper(model, base, data, hyper, seed=7, client_id=1)
    local = load_base(model, base)
    expected = _query_batch_oracle(local, dict(local.params), data, hyper, 7, list(local.params))
    assert up.payload.names() == local.base_names()
    assert bitwise_equal(up.payload.entries, {k: expected[k] for k in local.base_names()})
    assert bitwise_equal(pers.entries, {k: expected[k] for k in local.personal_names()})


def test_fedmetaper_zero_lr_identity(setting):
    model, data = setting
    base, personal = split_params(model)
    up, pers = client_update_fedmetaper(model, base, data, Hyper(lr_local=0.0, hessian_mode="full_hvp",
                                                                  batch_size=8), seed=1)
    assert up.payload.bitwise_equal(base) and pers.bitwise_equal(personal)


def test_personalize(setting):
    model, data = setting
    m64 = model.astype(np.float64)
    p = full_params(m64)
    assert bitwise_equal(personalize(m64, p, data, 0, 0.05).params, m64.params)
    one = personalize(m64, p, data, 1, 0.05)
    _, g = loss_and_grad(m64.params, m64.specs, Batch(data.inputs, data.labels))
    assert bitwise_equal(one.params, sgd_step(m64.params, g, 0.05))
    only = personalize(m64, p, data, 2, 0.05, names=m64.personal_names())
    assert bitwise_equal({k: only.params[k] for k in m64.base_names()},
                         {k: m64.params[k] for k in m64.base_names()})


@pytest.mark.parametrize("seed", range(5))
def test_personalize_descends(seed):
    m = build_model("mini", seed, np.float64)
    data = generate_client_data(ClientSpec(1, 16, 16), (16, 8, 8), seed + 100)
    batch = Batch(data.inputs, data.labels)
    after = personalize(m, full_params(m), data, 5, 0.01)
    assert loss_only(after.params, m.specs, batch) <= loss_only(m.params, m.specs, batch)


def test_hyper_validation():
    for bad in ({"lr_local": -1.0}, {"batch_size": 0}, {"local_epochs": 1.5}, {"hessian_mode": "exact"}):
        with pytest.raises(ConfigError):
            Hyper(**bad)
