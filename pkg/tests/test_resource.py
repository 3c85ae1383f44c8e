from fractions import Fraction
from dataclasses import replace

import numpy as np
import pytest

from lwfedssl import tensor as T
from lwfedssl.model import ModelSpec, Params, build_model, forward_encoder, head_forward, serialize_model
from lwfedssl.resource import (
    ResourceLedger,
    block_flops,
    comm_round,
    encoder_flops,
    flops_local_round,
    head_flops,
    memory_breakdown,
    memory_model,
    message_bytes,
    plan_ledger,
)
from lwfedssl.schedule import StageSchedule

TWELVE = ModelSpec(input_dim=64, num_layers=12, block_hidden_dim=128, block_out_dim=64, proj_hidden=64, proj_out=32, pred_hidden=64)
SIX = ModelSpec(input_dim=256, num_layers=6, block_hidden_dim=64, block_out_dim=32, proj_hidden=128, proj_out=32, pred_hidden=128)


def test_block_flops_hand_count():
    spec = ModelSpec(input_dim=2, num_layers=2, block_hidden_dim=3, block_out_dim=2, proj_hidden=2, proj_out=2, pred_hidden=2)
    # BN 4*2, fc1 2*2*3 + bias 3, GELU 8*3, fc2 2*3*2 + bias 2, residual 2
    assert block_flops(spec, 0) == 8 + 12 + 3 + 24 + 12 + 2 + 2 == 63
    # proj 2->2->2->2: three (matmul 8 + BN 8) plus two ReLU of 2
    assert head_flops(spec, "proj") == 3 * 16 + 2 * 2


def test_analytic_flops_match_instrumented_forward(square_spec, rng):
    m = build_model(square_spec, 0, dtype=np.float64)
    B = 4
    x = rng.standard_normal((B, 16))
    with T.count_flops() as c:
        z = forward_encoder(m, x, train=True).data
    assert sum(c.values()) == B * encoder_flops(square_spec, 3)
    p = Params(m)
    for head, inp in (("proj", z), ("pred", rng.standard_normal((B, 8)))):
        with T.count_flops() as c:
            head_forward(T.Tensor(inp), p, head, True)
        assert sum(c.values()) == B * head_flops(square_spec, head)


def test_backward_is_twice_trainable_forward():
    fwd, bwd = flops_local_round(SIX, "progressive", 2, 32, 1, False)
    trainable = encoder_flops(SIX, 2) + head_flops(SIX, "proj") + head_flops(SIX, "pred")
    assert bwd == 2 * 2 * trainable


def test_per_round_backward_ordering():
    lw = StageSchedule.build("layer_wise", 6, 30)
    for r in range(30):
        s = lw.stage(r)
        b_lw = flops_local_round(SIX, "layer_wise", s, 32, 1, False)[1]
        b_pr = flops_local_round(SIX, "progressive", s, 32, 1, False)[1]
        b_e2e = flops_local_round(SIX, "end_to_end", s, 32, 1, False)[1]
        assert b_lw <= b_pr <= b_e2e
        assert (b_pr == b_e2e) == (s == 6)


def test_comm_ratios_exact_for_twelve_layers():
    sizes = [100] * 4
    totals = {}
    for strategy in ("end_to_end", "layer_wise", "lw_fedssl"):
        sched = StageSchedule.build(strategy, 12, 180)
        totals[strategy] = plan_ledger(TWELVE, sched, sizes, 32, 1, False).totals("client:0")
    assert Fraction(totals["end_to_end"]["enc_bytes_up"], totals["layer_wise"]["enc_bytes_up"]) == 12
    assert Fraction(totals["end_to_end"]["enc_bytes_down"], totals["lw_fedssl"]["enc_bytes_down"]) == Fraction(2160, 1170)


def test_message_bytes_equal_serialized_size(square_spec):
    sched = StageSchedule.build("lw_fedssl", 3, 6)
    m = build_model(square_spec, 0, staged=False)
    m.active_depth, m.frozen_prefix = 2, 1
    down = tuple(sched.download(2))
    assert message_bytes(square_spec, 2, 1, down) == len(serialize_model(m, list(down)))
    c = comm_round(square_spec, sched, 2)
    assert c.bytes_up < c.bytes_down


def test_memory_properties():
    S = SIX.num_layers
    assert memory_model(SIX, "progressive", S, 32) == memory_model(SIX, "end_to_end", S, 32)
    assert memory_model(SIX, "layer_wise", 1, 32) == memory_model(SIX, "progressive", 1, 32)
    lw = [memory_model(SIX, "layer_wise", s, 32) for s in range(1, S + 1)]
    pr = [memory_model(SIX, "progressive", s, 32) for s in range(1, S + 1)]
    assert all(a <= b for a, b in zip(lw, pr))
    small, big = memory_breakdown(SIX, "progressive", 3, 32), memory_breakdown(SIX, "progressive", 3, 64)
    assert big["activations"] == 2 * small["activations"]
    assert {k: v for k, v in big.items() if k != "activations"} == {k: v for k, v in small.items() if k != "activations"}
    assert memory_model(SIX, "lw_fedssl", 3, 32, True) > memory_model(SIX, "lw_fedssl", 3, 32, False)


def test_ledger_csv_round_trip_and_order():
    sched = StageSchedule.build("lw_fedssl", 3, 6)
    ledger = plan_ledger(replace(SIX, num_layers=3), sched, [40, 64], 32, 1, True,
                         n_aux=20, calibration_epochs=2)
    back = ResourceLedger.from_csv(ledger.to_csv())
    assert back.entries == ledger.entries
    assert [e.actor for e in ledger.entries[:3]] == ["client:0", "client:1", "SERVER"]
    assert ledger.totals("SERVER")["bytes_up"] == 0


@pytest.mark.parametrize("strategy", ["end_to_end", "progressive", "layer_wise", "lw_fedssl"])
def test_ledger_is_seed_free(strategy):
    sched = StageSchedule.build(strategy, 6, 12)
    a = plan_ledger(SIX, sched, [50, 70], 32, 2, True).to_csv()
    b = plan_ledger(SIX, sched, [50, 70], 32, 2, True).to_csv()
    assert a == b
