import numpy as np
import pytest

from lwfedssl.fed import (
    AggregationError,
    FedConfig,
    OptimConfig,
    advance_stage,
    aggregate,
    participants_for_round,
    run_federation,
    server_calibrate,
)
from lwfedssl.model import ModelSpec, OptimizerState, build_model, serialize_model
from lwfedssl.schedule import ConfigError
from lwfedssl.ssl import AugmentPolicy, MomentumBranch, SslConfig, augment, derive_seed, iter_batches

import oracles


def random_groups(rng, dtype=np.float32):
    return {"a": {"w": rng.standard_normal((3, 4)).astype(dtype)}, "b": {"v": rng.standard_normal(5).astype(dtype)}}


# ---------------------------------------------------------------------------
# aggregation


def test_aggregate_fixed_point(rng):
    g = random_groups(rng, np.float64)
    out = aggregate([g, g, g], [0.2, 0.3, 0.5])
    for k in g:
        for n in g[k]:
            np.testing.assert_allclose(out[k][n], g[k][n], rtol=0, atol=1e-15)


def test_aggregate_zero_and_four():
    zero = {"a": {"w": np.zeros(2)}}
    four = {"a": {"w": np.full(2, 4.0)}}
    np.testing.assert_array_equal(aggregate([zero, four], [0.25, 0.75])["a"]["w"], [3.0, 3.0])


def test_aggregate_five_models_matches_mean(rng):
    models = [random_groups(rng) for _ in range(5)]
    out = aggregate(models, [0.2] * 5)
    for k in out:
        for n in out[k]:
            ref = np.mean([m[k][n].astype(np.float64) for m in models], axis=0)
            assert out[k][n].dtype == np.float32
            assert np.abs(out[k][n] - ref).max() <= 1e-6


def test_aggregate_errors(rng):
    g = random_groups(rng)
    with pytest.raises(AggregationError):
        aggregate([], [])
    with pytest.raises(AggregationError):
        aggregate([g, g], [0.5, 0.6])
    with pytest.raises(AggregationError):
        aggregate([g], [0.5, 0.5])
    bad = random_groups(rng)
    bad["a"]["w"] = np.zeros((2, 2), np.float32)
    with pytest.raises(AggregationError):
        aggregate([g, bad], [0.5, 0.5])


# ---------------------------------------------------------------------------
# stage growth and calibration


def test_advance_stage_with_and_without_transfer(square_spec):
    for transfer in (True, False):
        m = build_model(square_spec, 0, staged=True)
        advance_stage(m, 1, "lw_fedssl", 0, transfer)
        m.groups["enc.0"]["fc1.weight"] += 1.0
        advance_stage(m, 2, "lw_fedssl", 0, transfer)
        assert m.active_depth == 2 and m.frozen_prefix == 1
        same = np.array_equal(m.groups["enc.1"]["fc1.weight"], m.groups["enc.0"]["fc1.weight"])
        assert same is transfer
        assert m.groups["enc.1"]["fc1.weight"] is not m.groups["enc.0"]["fc1.weight"]
    prog = build_model(square_spec, 0, staged=True)
    advance_stage(prog, 1, "progressive", 0)
    advance_stage(prog, 2, "progressive", 0)
    assert prog.frozen_prefix == 0
    with pytest.raises(ValueError):
        advance_stage(prog, 1, "progressive", 0)


def test_transfer_skipped_when_shapes_differ(tiny_spec, caplog):
    m = build_model(tiny_spec, 0, staged=True)
    with caplog.at_level("WARNING", logger="lwfedssl"):
        advance_stage(m, 1, "layer_wise", 0)
        advance_stage(m, 2, "layer_wise", 0)
    assert m.groups["enc.1"]["fc1.weight"].shape == (4, 5)
    assert "transfer" in caplog.text


def test_server_calibrate_zero_epochs_is_noop(square_spec, rng):
    m = build_model(square_spec, 0)
    before = serialize_model(m)
    assert server_calibrate(m, rng.standard_normal((8, 16)), 0, SslConfig(), OptimizerState(), lambda e: 1.0,
                            AugmentPolicy(), 0) is None
    assert serialize_model(m) == before


def test_server_calibrate_needs_aux(square_spec):
    with pytest.raises(ConfigError):
        server_calibrate(build_model(square_spec, 0), None, 1, SslConfig(), OptimizerState(), lambda e: 1.0,
                         AugmentPolicy(), 0)


def test_server_calibrate_matches_oracle_and_restores_prefix(tiny_spec, rng):
    m = build_model(tiny_spec, 2, dtype=np.float64)
    m.frozen_prefix = 1
    aux = rng.standard_normal((4, 6))
    cfg = SslConfig(batch_size=4, momentum=0.9)
    policy = AugmentPolicy(jitter_sigma=0.2)
    seed, lr = 5, 0.03

    online = oracles.TorchModel(m.groups, 2, 0)
    target = oracles.TorchModel(MomentumBranch.from_model(m).groups, 2, 0)
    batches = [augment(aux[idx], policy, derive_seed(seed, 0), idx)
               for idx in iter_batches(4, 4, np.random.default_rng(derive_seed(seed, 0)))]
    topt = oracles.local_update(online, target, None, batches, cfg.temperature, cfg.momentum, 0.0, lr, 1e-5)

    server_calibrate(m, aux, 1, cfg, OptimizerState(weight_decay=1e-5), lambda e: lr, policy, seed)
    assert m.frozen_prefix == 1
    grads = {k: topt.state[t]["exp_avg"].abs().max().item() / 0.1
             for k, t in zip(oracles.trainable_names(online), topt.param_groups[0]["params"])}
    for g, grp in online.numpy().items():
        for n, ref in grp.items():
            # zero-gradient parameters carry only Adam-amplified round-off
            tol = 2 * lr * 1e-4 if grads.get((g, n), 1.0) < 1e-12 else 1e-10
            np.testing.assert_allclose(m.groups[g][n], ref, rtol=0, atol=tol, err_msg=f"{g}/{n}")
    # both encoder layers moved: calibration trains the frozen prefix too
    assert not np.array_equal(m.groups["enc.0"]["fc1.weight"], build_model(tiny_spec, 2, dtype=np.float64).groups["enc.0"]["fc1.weight"])


# ---------------------------------------------------------------------------
# federation runs


SSL = SslConfig(batch_size=4, local_epochs=1, momentum=0.9)
OPTIM = OptimConfig(base_lr=0.05)


def run(spec, strategy, data, aux=None, workers=1, rounds=3, trace=None, **fed_kw):
    ssl = fed_kw.pop("ssl", SSL)
    fed = FedConfig(strategy=strategy, clients=len(data), rounds=rounds, **fed_kw)

    def on_round(rec, model):
        if trace is not None:
            trace.append(serialize_model(model))

    return run_federation(spec, fed, ssl, OPTIM, AugmentPolicy(jitter_sigma=0.3), data, aux, seed=7,
                          workers=workers, on_round=on_round)


@pytest.fixture
def client_data(rng):
    return [rng.standard_normal((n, 16)).astype(np.float32) for n in (8, 12, 8)]


@pytest.mark.parametrize("workers", [1, 4])
def test_progressive_single_stage_equals_end_to_end(client_data, workers):
    spec = ModelSpec(input_dim=16, num_layers=1, block_hidden_dim=12, block_out_dim=16, proj_hidden=16, proj_out=8, pred_hidden=16)
    a, b = [], []
    run(spec, "progressive", client_data, workers=workers, trace=a)
    run(spec, "end_to_end", client_data, workers=workers, trace=b)
    assert len(a) == 3 and a == b


@pytest.mark.parametrize("workers", [1, 4])
def test_lw_fedssl_without_extras_equals_layer_wise(square_spec, client_data, workers):
    ssl = SslConfig(batch_size=4, local_epochs=1, momentum=0.9, align_weight=0.0)
    fed_a = FedConfig(strategy="lw_fedssl", clients=3, rounds=3, calibration_epochs=0)
    fed_b = FedConfig(strategy="layer_wise", clients=3, rounds=3)
    traces = []
    for fed in (fed_a, fed_b):
        t = []
        run_federation(square_spec, fed, ssl, OPTIM, AugmentPolicy(jitter_sigma=0.3), client_data, None, seed=7,
                       workers=workers, on_round=lambda rec, m, t=t: t.append(serialize_model(m)))
        traces.append(t)
    assert len(traces[0]) == 3 and traces[0] == traces[1]


def test_worker_count_does_not_change_result(square_spec, client_data, rng):
    aux = rng.standard_normal((8, 16))
    a, b = [], []
    run(square_spec, "lw_fedssl", client_data, aux, workers=1, trace=a)
    run(square_spec, "lw_fedssl", client_data, aux, workers=4, trace=b)
    assert a == b


def test_layer_wise_round_freezes_and_uploads_one_layer(square_spec, client_data, monkeypatch):
    from lwfedssl import fed as fed_mod

    seen = []
    original = fed_mod._client_round

    def spy(client, r, broadcast, *args):
        frozen = {g: {n: a.copy() for n, a in broadcast.groups[g].items()}
                  for g in (f"enc.{i}" for i in range(broadcast.frozen_prefix))}
        res = original(client, r, broadcast, *args)
        seen.append((r, broadcast.active_depth, frozen, res, broadcast))
        return res

    monkeypatch.setattr(fed_mod, "_client_round", spy)
    run(square_spec, "layer_wise", client_data, rounds=3)
    assert len(seen) == 9
    for r, depth, frozen, res, broadcast in seen:
        assert sorted(res.upload) == sorted([f"enc.{depth - 1}", "proj", "pred"])
        for g, grp in frozen.items():
            assert g not in res.upload
            for n, a in grp.items():
                assert broadcast.groups[g][n].tobytes() == a.tobytes()


def test_round_records_and_calibration_loss(square_spec, client_data, rng):
    model, records = run(square_spec, "lw_fedssl", client_data, rng.standard_normal((8, 16)))
    assert [r.stage for r in records] == [1, 2, 3]
    assert all(r.calibration_loss is not None and np.isfinite(r.mean_local_loss) for r in records)
    assert all(e.actor == "SERVER" for e in records[0].resources[-1:])
    assert model.active_depth == 3 and model.frozen_prefix == 2


def test_lw_fedssl_needs_aux(square_spec, client_data):
    with pytest.raises(ConfigError):
        run(square_spec, "lw_fedssl", client_data, None)


def test_client_count_mismatch(square_spec, client_data):
    with pytest.raises(ConfigError):
        run_federation(square_spec, FedConfig(strategy="layer_wise", clients=4, rounds=3), SSL, OPTIM,
                       AugmentPolicy(), client_data)


def test_participants_subsample_is_deterministic():
    assert participants_for_round(5, 1.0, 0, 0) == [0, 1, 2, 3, 4]
    a = participants_for_round(10, 0.3, 1, 2)
    assert a == participants_for_round(10, 0.3, 1, 2) and len(a) == 3


def test_fed_config_validation():
    with pytest.raises(ConfigError):
        FedConfig(strategy="fedprox")
    with pytest.raises(ConfigError):
        FedConfig(client_fraction=0)
