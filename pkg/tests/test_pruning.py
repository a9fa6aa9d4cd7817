from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from expertnas.model import ArchitectureEncoding, MoEModel, ModelConfig, Router, Expert, SwitchFFNLayer
from expertnas.model import count_params, load_checkpoint, save_checkpoint, switch_ffn_forward
from expertnas.numerics import ContractError, Tensor, no_grad
from expertnas.pruning import (
    PRUNE_LOG_COLUMNS,
    ExpertUsageStats,
    NothingToPrune,
    PruneThresholds,
    collect_usage,
    prune_expert,
    prune_log_csv,
    prune_loop,
    select_prune_target,
    usage_from_trace,
)

CFG = ModelConfig(d_model=8, d_hidden=12, n_heads=2, n_layers=3, max_experts=4)


def model(enc=(2, 3, 4), seed=0, **kw):
    return MoEModel(replace(CFG, **kw), ArchitectureEncoding(list(enc)), seed=seed)


def kill_expert(m: MoEModel, layer: int, expert: int) -> None:
    # a very negative router bias means the expert can never win the argmax
    m.blocks[layer].switch.router.bias.data[expert] = -1e3


# usage statistics

def test_usage_matches_per_image_replay(small_dataset):
    m = model()
    stats = collect_usage(m, small_dataset.val)
    oracle = [Counter() for _ in range(3)]
    for img in small_dataset.val.images[:50]:
        _, tok = m.predict(img[None])
        for l in range(3):
            oracle[l].update(tok[0, l].tolist())
    head = collect_usage(m, replace(small_dataset.val, images=small_dataset.val.images[:50]))
    for l, n in enumerate((2, 3, 4)):
        assert head.counts[l].tolist() == [oracle[l][e] for e in range(n)]
    # every token lands somewhere in every layer
    for c, t in zip(stats.counts, stats.total_tokens):
        assert c.sum() == t == len(small_dataset.val) * CFG.n_tokens


def test_usage_from_trace_counts_and_top_share():
    trace = np.array([[[0, 0, 1, 2], [1, 1, 1, 1]], [[0, 2, 2, 2], [0, 1, 1, 1]]])
    stats = usage_from_trace(trace, [3, 2])
    assert [c.tolist() for c in stats.counts] == [[3, 1, 4], [1, 7]]
    assert stats.total_tokens == [8, 8]
    assert stats.top_share(2) == [7 / 8, 1.0]
    assert stats.top_share(1) == [4 / 8, 7 / 8]


def test_pruned_expert_gets_no_tokens(small_dataset):
    m = model()
    prune_expert(m, 2, 1)
    assert collect_usage(m, small_dataset.val).counts[2][1] == 0


# target selection

@st.composite
def usage_and_masks(draw):
    L = draw(st.integers(1, 5))
    counts, masks = [], []
    for _ in range(L):
        n = draw(st.integers(1, 5))
        m = np.array(draw(st.lists(st.booleans(), min_size=n, max_size=n)))
        if not m.any():
            m[draw(st.integers(0, n - 1))] = True
        c = np.array(draw(st.lists(st.integers(0, 4), min_size=n, max_size=n)))
        counts.append(np.where(m, c, 0))
        masks.append(m)
    return ExpertUsageStats(counts, [int(c.sum()) for c in counts]), masks


@settings(max_examples=200, deadline=None)
@given(usage_and_masks())
def test_select_target_matches_exhaustive_scan(case):
    stats, masks = case
    cands = [(int(stats.counts[l][e]), l, e)
             for l in range(len(masks)) if masks[l].sum() >= 2
             for e in range(masks[l].size) if masks[l][e]]
    if not cands:
        with pytest.raises(NothingToPrune):
            select_prune_target(stats, masks)
        return
    _, l, e = min(cands)
    assert select_prune_target(stats, masks) == (l, e)


def test_select_target_tie_prefers_lowest_layer_then_expert():
    stats = ExpertUsageStats([np.array([5, 2]), np.array([2, 2, 9])], [7, 13])
    masks = [np.ones(2, bool), np.ones(3, bool)]
    assert select_prune_target(stats, masks) == (0, 1)


def test_select_target_skips_single_expert_layers():
    stats = ExpertUsageStats([np.array([0]), np.array([4, 3])], [0, 7])
    assert select_prune_target(stats, [np.ones(1, bool), np.ones(2, bool)]) == (1, 1)


def test_prune_expert_contract():
    m = model((1, 2, 2))
    with pytest.raises(ContractError):
        prune_expert(m, 0, 0)  # last expert of the layer
    with pytest.raises(ContractError):
        prune_expert(m, 3, 0)
    prune_expert(m, 1, 0)
    with pytest.raises(ContractError):
        prune_expert(m, 1, 0)  # already pruned
    with pytest.raises(ContractError):
        prune_expert(m, 1, 1)


def test_prune_drops_one_expert_worth_of_parameters():
    m = model((2, 3, 4))
    before = m.parameter_count()
    prune_expert(m, 1, 2)
    assert m.active_counts() == [2, 2, 4]
    assert before - m.parameter_count() == CFG.d_model * CFG.d_hidden * 2 + CFG.d_hidden + CFG.d_model
    assert m.parameter_count() == count_params(m.encoding, m.config, [2, 2, 4])


# no-op safety and rerouting

def test_zero_usage_prune_is_a_no_op(small_dataset):
    m = model((3, 3, 3), seed=4)
    kill_expert(m, 1, 2)
    assert collect_usage(m, small_dataset.val).counts[1][2] == 0
    with no_grad():
        before = m.forward(small_dataset.val.images).logits.data.copy()
    prune_expert(m, 1, 2)
    with no_grad():
        after = m.forward(small_dataset.val.images).logits.data
    np.testing.assert_array_equal(np.argmax(after, 1), np.argmax(before, 1))
    np.testing.assert_array_equal(after, before)


def _layer(rng, n, gate_mode, d=5, h=7):
    r = Router(Tensor(rng.normal(size=(d, n))), Tensor(rng.normal(size=n)))
    ex = [Expert(Tensor(rng.normal(size=(d, h))), Tensor(rng.normal(size=h)),
                 Tensor(rng.normal(size=(h, d))), Tensor(rng.normal(size=d))) for _ in range(n)]
    return SwitchFFNLayer(r, ex, gate_mode)


def _expert_np(ex, x):
    z = x @ ex.w1.data + ex.b1.data
    g = 0.5 * z * (1 + np.tanh(np.sqrt(2 / np.pi) * (z + 0.044715 * z ** 3)))
    return g @ ex.w2.data + ex.b2.data


@pytest.mark.parametrize("gate_mode", ["full", "renormalized"])
def test_pruned_tokens_fall_through_to_next_best(gate_mode):
    rng = np.random.default_rng(11)
    layer = _layer(rng, 4, gate_mode)
    x = rng.normal(size=(300, 5))
    logits = x @ layer.router.weight.data + layer.router.bias.data
    full = np.exp(logits - logits.max(1, keepdims=True))
    full /= full.sum(1, keepdims=True)
    first = np.argmax(full, 1)
    victim = int(np.bincount(first, minlength=4).argmax())
    layer.router.active_mask[victim] = False
    with no_grad():
        out = switch_ffn_forward(layer, Tensor(x))
    masked = full.copy()
    masked[:, victim] = -1
    choice = np.argmax(masked, 1)
    np.testing.assert_array_equal(out.expert_index, choice)
    moved = first == victim
    assert moved.sum() > 0
    np.testing.assert_array_equal(out.expert_index[~moved], first[~moved])
    keep = np.arange(4) != victim
    for t in range(300):
        e = choice[t]
        if gate_mode == "full":
            gate = full[t, e]
        else:
            gate = full[t, e] / full[t, keep].sum()
        np.testing.assert_allclose(out.out.data[t], gate * _expert_np(layer.experts[e], x[t]), rtol=1e-10, atol=1e-12)


# the loop

def test_loop_strict_thresholds_keep_only_baseline(small_dataset):
    m = model(seed=2)
    original = save_checkpoint(m)
    res = prune_loop(m, small_dataset, PruneThresholds(max_acc_drop=-1.0))
    assert res.stop_reason == "threshold"
    assert len(res.log) == 1 and res.log[0].layer is None
    assert res.rejected is not None and res.rejected.iteration == 1
    assert save_checkpoint(res.model) == original


def test_loop_runs_down_to_single_experts(small_dataset):
    m = model((2, 3, 2), seed=1)
    res = prune_loop(m, small_dataset, PruneThresholds(max_acc_drop=1.0, max_fairness_drop=100.0))
    assert res.stop_reason == "nothing_to_prune"
    assert res.model.active_counts() == [1, 1, 1]
    pc = [e.param_count for e in res.log]
    assert len(pc) == 1 + 4
    assert all(a > b for a, b in zip(pc, pc[1:]))
    assert pc[-1] == count_params(res.model.encoding, CFG, [1, 1, 1])


def test_loop_single_expert_model(small_dataset):
    res = prune_loop(model((1, 1, 1)), small_dataset)
    assert res.stop_reason == "nothing_to_prune" and len(res.log) == 1
    assert res.reduction == 0.0


def test_loop_iteration_budget(small_dataset):
    res = prune_loop(model((4, 4, 4)), small_dataset, PruneThresholds(1.0, 100.0, max_iterations=2))
    assert res.stop_reason == "max_iterations" and len(res.log) == 3
    res0 = prune_loop(model((4, 4, 4)), small_dataset, PruneThresholds(max_iterations=0))
    assert res0.stop_reason == "no_budget" and len(res0.log) == 1


def test_rollback_restores_last_accepted_state(small_dataset):
    m = model((3, 3, 3), seed=5)
    # accept exactly one step by letting it pass then refusing everything after
    first = prune_loop(load_checkpoint(save_checkpoint(m)), small_dataset, PruneThresholds(1.0, 100.0, 1))
    accepted = save_checkpoint(first.model)
    res = prune_loop(first.model, small_dataset, PruneThresholds(max_acc_drop=-1.0))
    assert save_checkpoint(res.model) == accepted


def test_prune_log_csv_schema(small_dataset):
    res = prune_loop(model((2, 1, 1)), small_dataset, PruneThresholds(1.0, 100.0))
    lines = prune_log_csv(res.log).strip().split("\n")
    assert lines[0] == ",".join(PRUNE_LOG_COLUMNS)
    assert len(lines) == 3
    assert lines[1].startswith("0,,,")
    assert lines[2].split(",")[:3] == ["1", str(res.log[1].layer), str(res.log[1].expert)]
