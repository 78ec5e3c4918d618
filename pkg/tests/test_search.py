import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from dualsr.models import build_dual, build_primal, drn_tiny, slice_width, spec_param_count
from dualsr.search import (BudgetError, ChannelBudget, SearchConfig, SearchState,
                           SearchSupernet, budget_gate, candidate_channels, decode_budget,
                           relaxed_forward, scaled_channels, search, search_hyperparams,
                           uniform_budget, width_gate)

SPEC = drn_tiny(4)


def branch_oracle(x, weight, bias, alpha, candidates):
    """Explicit mixture: every branch convolves its first c filters, pads, and is weighted."""
    w = torch.softmax(alpha, 0)
    out = 0
    for wv, c in zip(w, candidates):
        y = F.conv2d(x, weight[:c], bias[:c], 1, 1)
        out = out + wv * F.pad(y, (0, 0, 0, 0, 0, weight.shape[0] - c))
    return out


def test_decode_arithmetic():
    assert scaled_channels(64, 0.3, 0.9) == 40
    assert scaled_channels(10, 0.5, 0.5) == 3  # 2.5 rounds half up
    assert scaled_channels(1, 0.7, 0.5) == 1
    assert candidate_channels(1, 0.3) == [1] * 6


def test_hyperparameter_defaults():
    d = search_hyperparams()
    assert (d["alpha_init"], d["lr"], d["epochs"], d["batch"]) == (0.0, 3e-4, 100, 16)
    cfg = SearchConfig()
    assert (cfg.alpha_lr, cfg.epochs, cfg.batch, cfg.alpha_betas) == (3e-4, 100, 16, (0.9, 0.999))
    state = SearchState.for_spec(SPEC, 0.3)
    assert all(torch.equal(a, torch.zeros(6)) for a in state.alphas.values())
    assert all(torch.allclose(state.weights(n), torch.full((6,), 1 / 6)) for n in state.channels)


def test_zero_alphas_tie_break_to_smallest_factor():
    zero = {n: torch.zeros(6) for n in SPEC.widths()}
    b = decode_budget(SPEC, zero, 0.3)
    assert all(e.v == 0.5 for e in b.entries) and not b.repaired
    assert b.widths == {n: scaled_channels(c, 0.3, 0.5) for n, c in SPEC.widths().items()}


def test_all_full_factor_decodes_to_round_of_keep_fraction():
    ones = {n: torch.tensor([0, 0, 0, 0, 0, 1.0]) for n in SPEC.widths()}
    uni = uniform_budget(SPEC, 0.3)
    assert uni.widths == {n: int(np.floor(0.7 * c + 0.5)) for n, c in SPEC.widths().items()}
    assert not uni.gated
    with pytest.raises(BudgetError):
        decode_budget(SPEC, ones, 0.3, repair=False)
    repaired = decode_budget(SPEC, ones, 0.3)
    assert repaired.repaired and repaired.satisfies_gate()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 31), ratio=st.sampled_from([0.3, 0.5, 0.7]))
def test_decoded_budget_always_passes_gate(seed, ratio):
    g = torch.Generator().manual_seed(seed)
    alphas = {n: torch.randn(6, generator=g) for n in SPEC.widths()}
    b = decode_budget(SPEC, alphas, ratio)
    built = build_primal(SPEC.with_widths(b.widths))
    psi = sum(p.numel() for p in built.parameters())
    assert psi == b.params_budget
    assert psi * 10 <= (10 - round(ratio * 10)) * spec_param_count(SPEC)
    assert budget_gate(psi, spec_param_count(SPEC), ratio)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 31), shift=st.floats(-50, 50))
def test_argmax_invariant_to_constant_shift(seed, shift):
    g = torch.Generator().manual_seed(seed)
    alphas = {n: torch.randn(6, generator=g, dtype=torch.float64) for n in SPEC.widths()}
    shifted = {n: a + shift for n, a in alphas.items()}
    a = {n: int(torch.argmax(x)) for n, x in alphas.items()}
    b = {n: int(torch.argmax(x)) for n, x in shifted.items()}
    if a == b:  # float rounding of the shift can only matter for near-ties
        assert decode_budget(SPEC, alphas, 0.5).widths == decode_budget(SPEC, shifted, 0.5).widths


@settings(max_examples=30, deadline=None)
@given(alpha=st.lists(st.floats(-30, 30), min_size=6, max_size=6))
def test_softmax_weights_sum_to_one(alpha):
    w = torch.softmax(torch.tensor(alpha, dtype=torch.float32), 0)
    assert abs(float(w.sum()) - 1) < 1e-6


def test_gate_is_unreachable_for_extreme_ratio():
    with pytest.raises(BudgetError):
        decode_budget(SPEC, {n: torch.zeros(6) for n in SPEC.widths()}, 0.99)


def _conv_setup(cout=12, dtype=torch.float64, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, 5, 7, 7, generator=g, dtype=dtype)
    w = torch.randn(cout, 5, 3, 3, generator=g, dtype=dtype)
    b = torch.randn(cout, generator=g, dtype=dtype)
    return x, w, b


def test_relaxed_forward_matches_branch_oracle():
    x, w, b = _conv_setup()
    cand = candidate_channels(12, 0.3)
    for alpha in (torch.zeros(6, dtype=torch.float64), torch.randn(6, dtype=torch.float64)):
        out = relaxed_forward(x, w, b, alpha, cand)
        assert (out - branch_oracle(x, w, b, alpha, cand)).abs().max() < 1e-12


def test_relaxed_forward_near_onehot_matches_slice():
    x, w, b = _conv_setup(dtype=torch.float32)
    cand = candidate_channels(12, 0.3)
    for i, c in enumerate(cand):
        alpha = torch.zeros(6)
        alpha[i] = 40
        ref = F.pad(F.conv2d(x, w[:c], b[:c], 1, 1), (0, 0, 0, 0, 0, 12 - c))
        assert (relaxed_forward(x, w, b, alpha, cand) - ref).abs().max() < 1e-5


def test_supernet_near_onehot_matches_slice_width():
    torch.manual_seed(0)
    P = build_primal(drn_tiny(4))
    state = SearchState.for_spec(P.spec, 0.3)
    with torch.no_grad():
        for a in state.alphas.values():
            a[3] = 40
    net = SearchSupernet(P, state)
    ref = build_primal(P.spec)
    ref.load_state_dict(P.state_dict())
    for name in P.spec.widths():
        slice_width(ref, name, state.candidates(name)[3])
    x = torch.rand(1, 3, 8, 8)
    assert (net(x) - ref(x)).abs().max() < 1e-5


def test_single_channel_layer_is_plain_conv():
    x, w, b = _conv_setup(cout=1, dtype=torch.float32)
    alpha = torch.randn(6)
    out = relaxed_forward(x, w, b, alpha, candidate_channels(1, 0.5))
    assert torch.equal(out, F.conv2d(x, w, b, 1, 1))


def test_relaxed_forward_rejects_non_finite_alpha():
    x, w, b = _conv_setup()
    with pytest.raises(ValueError):
        relaxed_forward(x, w, b, torch.tensor([0, 0, float("nan"), 0, 0, 0.0]), [6, 7, 8, 9, 10, 12])


def test_relaxed_forward_gradients_match_finite_differences():
    x, w, b = _conv_setup()
    alpha = torch.randn(6, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    cand = candidate_channels(12, 0.3)
    r = torch.randn(2, 12, 7, 7, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    params = [w, b, alpha]

    def f():
        return (relaxed_forward(x, w, b, alpha, cand) * r).sum()

    for p in params:
        p.requires_grad_(True)
    grads = torch.autograd.grad(f(), params)
    sizes = np.cumsum([0] + [p.numel() for p in params])
    coords = list(np.random.default_rng(0).choice(sizes[-1] - 6, 94, replace=False)) + \
        list(range(sizes[-1] - 6, sizes[-1]))
    eps, worst = 1e-6, 0.0
    with torch.no_grad():
        for c in coords:
            i = int(np.searchsorted(sizes, c, side="right") - 1)
            p, j = params[i].view(-1), int(c - sizes[i])
            orig = p[j].item()
            p[j] = orig + eps
            up = f().item()
            p[j] = orig - eps
            down = f().item()
            p[j] = orig
            num, ana = (up - down) / (2 * eps), grads[i].view(-1)[j].item()
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-8))
    assert len(coords) == 100 and worst < 1e-4


def test_width_gate_weights():
    alpha = torch.zeros(3)
    g = width_gate(alpha, [2, 3, 4], 4)
    assert torch.allclose(g, torch.tensor([1, 1, 2 / 3, 1 / 3]))


def _search(pairs, **kw):
    torch.manual_seed(0)
    P, D = build_primal(drn_tiny(4)), build_dual(4)
    cfg = SearchConfig(**{"ratio": 0.3, "epochs": 2, "batch": 2, "patch_size": 8,
                          "steps_per_epoch": 2, **kw})
    return search(P, D, pairs[:3], pairs[3:], cfg), P, D


def test_search_smoke_emits_valid_budget(small_pairs, tmp_path):
    res, P, D = _search(small_pairs)
    b = res.budget
    assert b.satisfies_gate() and set(b.widths) == set(P.spec.widths())
    assert len(res.history) == 2
    for name in res.state.channels:
        assert abs(float(res.state.weights(name).sum().detach()) - 1) < 1e-6
        assert not torch.equal(res.state.alphas[name].detach(), torch.zeros(6))
    b.save(tmp_path / "b.json")
    again = ChannelBudget.load(tmp_path / "b.json")
    assert again.widths == b.widths and again.params_budget == b.params_budget
    assert all(p.requires_grad for p in D.parameters())


def test_search_leaves_inputs_untouched(small_pairs):
    torch.manual_seed(0)
    P, D = build_primal(drn_tiny(4)), build_dual(4)
    before = [t.clone() for t in list(P.state_dict().values()) + list(D.state_dict().values())]
    search(P, D, small_pairs[:3], small_pairs[3:], SearchConfig(epochs=1, batch=2, patch_size=8,
                                                                steps_per_epoch=1))
    after = list(P.state_dict().values()) + list(D.state_dict().values())
    assert all(torch.equal(a, b) for a, b in zip(before, after))


def test_search_decode_is_deterministic(small_pairs):
    a, _, _ = _search(small_pairs, seed=5)
    b, _, _ = _search(small_pairs, seed=5)
    assert a.budget.widths == b.budget.widths
    assert all(torch.equal(a.state.alphas[n], b.state.alphas[n]) for n in a.state.channels)


def test_search_rejects_overlap_and_bad_ratio(small_pairs):
    P, D = build_primal(drn_tiny(4)), build_dual(4)
    with pytest.raises(ValueError):
        search(P, D, small_pairs, small_pairs[:1], SearchConfig(epochs=1))
    with pytest.raises(ValueError):
        search(P, D, small_pairs[:2], small_pairs[2:], SearchConfig(ratio=1.0, epochs=1))
