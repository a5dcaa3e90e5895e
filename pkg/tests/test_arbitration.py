import random

import pytest

from rrfp.arbitration import (
    DRAIN_BACKWARD,
    FOCUS_MICROBATCH,
    NORMAL,
    ArbiterState,
    BackpressureState,
    HintOrder,
    StageBuffers,
    StageProgress,
    TpGroup,
    arbitrate,
    next_by_priority,
    tp_coordinate,
    update_backpressure,
)
from rrfp.workload import BACKWARD, FORWARD, TaskId

from test_workload import uniform_workload


def t(stage, mb, chunk, d):
    return TaskId(stage, mb, chunk, d)


# --- within-direction priority --------------------------------------------

def test_forward_prefers_smaller_chunk():
    cands = [t(0, 0, 1, FORWARD), t(0, 1, 0, FORWARD)]
    assert next_by_priority(cands, FORWARD) == t(0, 1, 0, FORWARD)


def test_backward_prefers_larger_chunk():
    cands = [t(0, 3, 0, BACKWARD), t(0, 1, 2, BACKWARD)]
    assert next_by_priority(cands, BACKWARD) == t(0, 1, 2, BACKWARD)


def test_ties_break_on_smaller_microbatch():
    cands = [t(0, 2, 0, FORWARD), t(0, 5, 0, FORWARD)]
    assert next_by_priority(cands, FORWARD) == t(0, 2, 0, FORWARD)
    assert next_by_priority([], FORWARD) is None


# --- arbitration ------------------------------------------------------------

def setup(w, limit=32):
    return (StageBuffers(), BackpressureState(limit=limit), ArbiterState(),
            StageProgress(w.num_chunks))


def test_bf_checks_backward_first():
    w = uniform_workload(2, 8)
    buffers, bp, arb, prog = setup(w)
    buffers.backward_ready[t(1, 2, 0, BACKWARD)] = 0
    buffers.forward_ready[t(1, 5, 0, FORWARD)] = 0
    d = arbitrate(buffers, HintOrder("bf"), bp, arb, w, prog)
    assert d.kind == BACKWARD and d.task.microbatch == 2


def test_bf_never_waits_for_unready_backward():
    w = uniform_workload(2, 8)
    buffers, bp, arb, prog = setup(w)
    buffers.forward_ready[t(1, 5, 0, FORWARD)] = 0
    d = arbitrate(buffers, HintOrder("bf"), bp, arb, w, prog)
    assert d.kind == FORWARD and d.task.microbatch == 5


def test_bfw_falls_back_to_weight_update():
    w = uniform_workload(2, 4, decompose_backward=True)
    buffers, bp, arb, prog = setup(w)
    buffers.weight_pending[t(0, 1, 0, "W")] = 0
    d = arbitrate(buffers, HintOrder("bfw"), bp, arb, w, prog)
    assert d.kind == "W" and d.task.microbatch == 1


def test_drain_mode_waits_rather_than_running_forward():
    w = uniform_workload(2, 8)
    buffers, bp, arb, prog = setup(w, limit=1)
    bp.n_f, bp.n_b = 1, 0
    bp = update_backpressure(bp, w, prog)
    assert bp.mode == DRAIN_BACKWARD
    buffers.forward_ready[t(0, 3, 0, FORWARD)] = 0
    d = arbitrate(buffers, HintOrder("bf"), bp, arb, w, prog)
    assert d.kind == "wait"


def test_backpressure_thresholds():
    w = uniform_workload(2, 8)
    _, bp, _, prog = setup(w, limit=4)
    bp.n_f, bp.n_b = 3, 0
    assert update_backpressure(bp, w, prog).mode == NORMAL
    bp.n_f = 4
    assert update_backpressure(bp, w, prog).mode == DRAIN_BACKWARD
    bp.n_b = 1  # lead back under the limit
    assert update_backpressure(bp, w, prog).mode == NORMAL


def test_interleaved_backpressure_focuses_lowest_unfinished():
    w = uniform_workload(2, 4, c=3)
    buffers, bp, arb, prog = setup(w, limit=2)
    bp.n_f, bp.n_b = 2, 0
    # microbatch 0 already did chunks 0,1 forward
    prog.mark(t(0, 0, 0, FORWARD))
    prog.mark(t(0, 0, 1, FORWARD))
    bp = update_backpressure(bp, w, prog)
    assert bp.mode == FOCUS_MICROBATCH
    assert bp.focus_microbatch == 0 and bp.focus_position == 2
    # the focused step is F chunk 2: an unrelated ready forward must not run
    buffers.forward_ready[t(0, 1, 0, FORWARD)] = 0
    d = arbitrate(buffers, HintOrder("bf"), bp, arb, w, prog)
    assert d.kind == "wait"
    buffers.forward_ready[t(0, 0, 2, FORWARD)] = 0
    d = arbitrate(buffers, HintOrder("bf"), bp, arb, w, prog)
    assert d.kind == FORWARD and d.task == t(0, 0, 2, FORWARD)


def test_focus_walks_completion_order():
    w = uniform_workload(1, 2, c=2)
    prog = StageProgress(2)
    assert prog.next_in_completion_order(0)[1] == t(-1, 0, 0, FORWARD)
    prog.mark(t(0, 0, 0, FORWARD))
    prog.mark(t(0, 0, 1, FORWARD))
    # backwards come in reverse chunk order
    assert prog.next_in_completion_order(0)[1] == t(-1, 0, 1, BACKWARD)
    prog.mark(t(0, 0, 1, BACKWARD))
    assert prog.next_in_completion_order(0)[1] == t(-1, 0, 0, BACKWARD)
    prog.mark(t(0, 0, 0, BACKWARD))
    assert prog.microbatch_finished(0)


def test_round_alternation_bf():
    # after a backward, a ready forward gets the next slot even if more
    # backwards are queued; the reverse holds for fb
    w = uniform_workload(2, 8)
    buffers, bp, arb, prog = setup(w)
    buffers.backward_ready[t(0, 0, 0, BACKWARD)] = 0
    buffers.backward_ready[t(0, 1, 0, BACKWARD)] = 0
    buffers.forward_ready[t(0, 2, 0, FORWARD)] = 0
    hint = HintOrder("bf")
    from rrfp.arbitration import advance_round_phase
    d1 = arbitrate(buffers, hint, bp, arb, w, prog)
    assert d1.kind == BACKWARD
    buffers.backward_ready.pop(d1.task)
    advance_round_phase(hint, arb, d1)
    d2 = arbitrate(buffers, hint, bp, arb, w, prog)
    assert d2.kind == FORWARD


def test_bprio_drains_all_backwards_first():
    w = uniform_workload(2, 8)
    buffers, bp, arb, prog = setup(w)
    buffers.backward_ready[t(0, 0, 0, BACKWARD)] = 0
    buffers.backward_ready[t(0, 1, 0, BACKWARD)] = 0
    buffers.forward_ready[t(0, 2, 0, FORWARD)] = 0
    hint = HintOrder("bprio")
    from rrfp.arbitration import advance_round_phase
    for expected_mb in (0, 1):
        d = arbitrate(buffers, hint, bp, arb, w, prog)
        assert d.kind == BACKWARD and d.task.microbatch == expected_mb
        buffers.backward_ready.pop(d.task)
        advance_round_phase(hint, arb, d)
    assert arbitrate(buffers, hint, bp, arb, w, prog).kind == FORWARD


def test_external_hint_scans_ranked_list():
    w = uniform_workload(2, 8)
    buffers, bp, arb, prog = setup(w)
    buffers.backward_ready[t(0, 1, 0, BACKWARD)] = 0
    buffers.forward_ready[t(0, 0, 0, FORWARD)] = 0
    hint = HintOrder("external", ranked=((FORWARD, "asc"), (BACKWARD, "desc")))
    assert arbitrate(buffers, hint, bp, arb, w, prog).kind == FORWARD


def test_nonblocking_property():
    # whenever anything is ready in normal mode, arbitration never waits
    w = uniform_workload(2, 16)
    rng = random.Random(0)
    for _ in range(300):
        buffers, bp, arb, prog = setup(w)
        for _ in range(rng.randint(1, 6)):
            mb = rng.randint(0, 15)
            if rng.random() < 0.5:
                buffers.forward_ready[t(0, mb, 0, FORWARD)] = 0
            else:
                buffers.backward_ready[t(0, mb, 0, BACKWARD)] = 0
        hint = HintOrder(rng.choice(["bf", "fb", "bprio", "fprio", "bfw"]))
        assert arbitrate(buffers, hint, bp, arb, w, prog).kind != "wait"


# --- coordination ------------------------------------------------------------

def test_coordination_agreement():
    group = TpGroup(group_size=4)
    task = t(0, 7, 0, FORWARD)
    assert tp_coordinate([task] * 4, group) == ("agreed", task)


def test_coordination_any_mismatch_defers():
    group = TpGroup(group_size=4)
    a, b = t(0, 7, 0, FORWARD), t(0, 8, 0, FORWARD)
    assert tp_coordinate([a, a, b, a], group)[0] == "deferred"


def test_coordination_missing_proposal_defers():
    group = TpGroup(group_size=3)
    a = t(0, 7, 0, FORWARD)
    assert tp_coordinate([a, None, a], group)[0] == "deferred"
    with pytest.raises(ValueError):
        tp_coordinate([a, a], group)


def test_hint_parse_rejects_unknown():
    with pytest.raises(ValueError):
        HintOrder("zigzag")
    with pytest.raises(ValueError):
        HintOrder("external")
