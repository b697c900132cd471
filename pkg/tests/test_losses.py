import itertools
import math
import time

import numpy as np
import pytest

from moe_route import autodiff as ad
from moe_route.autodiff import Tensor
from moe_route.decode import collapse_path
from moe_route.losses import (LossWeights, ce_loss, combined_batch_loss,
                              combined_onfly_loss, ctc_feasible, ctc_loss,
                              kl_diversity_loss, mse_routing_loss)

from conftest import finite_difference, rel_grad_error


def log_softmax_np(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def brute_force_ctc(logits, target):
    """Enumerate every frame labeling that collapses to the target."""
    T, V = logits.shape
    lp = log_softmax_np(logits)
    target = tuple(target)
    total = -np.inf
    for path in itertools.product(range(V), repeat=T):
        if collapse_path(path, V - 1) == target:
            total = np.logaddexp(total, sum(lp[t, p] for t, p in enumerate(path)))
    return -total


def test_ctc_single_frame_uniform():
    # one frame, V=2, uniform: only the path [a] works, p = 0.5
    loss = ctc_loss(Tensor(np.zeros((1, 2))), [0])
    assert abs(loss.item() - 0.6931471805599453) < 1e-12


def test_ctc_two_frame_enumeration():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((2, 2))
    lp = log_softmax_np(logits)
    # paths aa, ab, ba with a=0, b=blank=1
    expected = -np.logaddexp.reduce([lp[0, 0] + lp[1, 0], lp[0, 0] + lp[1, 1],
                                     lp[0, 1] + lp[1, 0]])
    assert abs(ctc_loss(Tensor(logits), [0]).item() - expected) < 1e-12


def test_ctc_matches_brute_force_small():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    for _ in range(60):
        T = int(rng.integers(1, 7))
        V = int(rng.integers(2, 5))
        U = int(rng.integers(1, 4))
        target = [int(x) for x in rng.integers(0, V - 1, size=U)]
        logits = rng.standard_normal((T, V))
        mine = ctc_loss(Tensor(logits), target).item()
        ref = brute_force_ctc(logits, target)
        if math.isinf(ref):
            assert math.isinf(mine)
            continue
        assert abs(mine - ref) / abs(ref) < 1e-10
    assert time.perf_counter() - start < 30


def test_ctc_infeasible_target_is_inf_with_zero_gradient():
    logits = Tensor(np.zeros((1, 3)), name="logits")
    loss = ctc_loss(logits, [0, 0])  # needs >= 3 frames
    assert math.isinf(loss.item())
    assert not ctc_feasible(1, [0, 0])
    assert ctc_feasible(3, [0, 0])
    assert loss._parents == ()  # constant: contributes no gradient


def test_ctc_rejects_bad_targets():
    with pytest.raises(ValueError):
        ctc_loss(Tensor(np.zeros((3, 4))), [])
    with pytest.raises(ValueError):
        ctc_loss(Tensor(np.zeros((3, 4))), [3])  # blank id not a valid label


def test_ctc_permutation_sensitive():
    rng = np.random.default_rng(2)
    logits = rng.standard_normal((6, 4))
    a = ctc_loss(Tensor(logits), [0, 1]).item()
    b = ctc_loss(Tensor(logits), [1, 0]).item()
    assert abs(a - b) > 1e-9


def test_kl_identical_experts_zero():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((4, 5))
    assert kl_diversity_loss([Tensor(a), Tensor(a.copy())]).item() == 0.0
    assert kl_diversity_loss([Tensor(a)]).item() == 0.0  # empty pair set


def test_kl_two_expert_hand_value():
    # softmax([0,0]) = [.5,.5]; softmax([ln3,0]) = [.75,.25]
    # ordered pair sum = D(p||q) + D(q||p) = 0.27465307216702744
    a1 = Tensor(np.array([[0.0, 0.0]]))
    a2 = Tensor(np.array([[math.log(3.0), 0.0]]))
    val = kl_diversity_loss([a1, a2]).item()
    assert abs(val - (-0.27465307216702744)) < 1e-12


def test_kl_matches_pairwise_loop_oracle():
    from moe_route.losses import KL_PAIR_CAP
    rng = np.random.default_rng(4)
    outs = [rng.standard_normal((3, 6)) for _ in range(4)]
    p = [np.exp(log_softmax_np(o)) for o in outs]
    lp = [log_softmax_np(o) for o in outs]
    ref = 0.0
    for i in range(4):
        for j in range(4):
            if i != j:
                d = (p[i] * (lp[i] - lp[j])).sum(axis=1).mean()
                ref += min(d, KL_PAIR_CAP)
    mine = kl_diversity_loss([Tensor(o) for o in outs]).item()
    assert abs(mine - (-ref)) < 1e-10


def test_kl_pair_divergences_saturate_at_cap():
    # wildly different near-one-hot experts: every ordered pair hits the cap
    a1 = Tensor(np.array([[100.0, 0.0, 0.0]]))
    a2 = Tensor(np.array([[0.0, 100.0, 0.0]]))
    a3 = Tensor(np.array([[0.0, 0.0, 100.0]]))
    from moe_route.losses import KL_PAIR_CAP
    val = kl_diversity_loss([a1, a2, a3]).item()
    assert abs(val - (-6 * KL_PAIR_CAP)) < 1e-9


def test_kl_always_nonpositive():
    rng = np.random.default_rng(5)
    for _ in range(20):
        n = int(rng.integers(2, 5))
        outs = [Tensor(rng.standard_normal((3, 4)) * rng.uniform(0.1, 5))
                for _ in range(n)]
        assert kl_diversity_loss(outs).item() <= 1e-10


def test_kl_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        kl_diversity_loss([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))])


def test_ce_values():
    assert abs(ce_loss(Tensor(np.zeros(5)), 0).item() - 1.6094379124341003) < 1e-12
    val = ce_loss(Tensor(np.array([10.0, -10.0])), 0).item()
    assert abs(val - math.log1p(math.exp(-20.0))) < 1e-15
    big_margin = ce_loss(Tensor(np.array([50.0, 0.0, 0.0])), 0).item()
    assert big_margin < 1e-12
    with pytest.raises(ValueError):
        ce_loss(Tensor(np.zeros(3)), 3)


def test_mse_routing():
    assert mse_routing_loss(Tensor([1.0, 2.0]), Tensor([1.0, 2.0])).item() == 0.0
    assert mse_routing_loss(Tensor([1.0, 0.0]), Tensor([0.0, 0.0])).item() == 0.5
    a, b = Tensor([1.0, 3.0]), Tensor([-1.0, 0.5])
    assert mse_routing_loss(a, b).item() == mse_routing_loss(b, a).item()
    with pytest.raises(ValueError):
        mse_routing_loss(Tensor([1.0]), Tensor([1.0, 2.0]))


def test_combined_weights_defaults():
    w = LossWeights()
    assert (w.alpha, w.beta, w.gamma) == (5.0, 0.1, 0.5)
    out = combined_batch_loss(Tensor(1.0), Tensor(-0.2), Tensor(2.0), w)
    assert abs(out.item() - 0.2) < 1e-12
    zero = combined_batch_loss(Tensor(1.5), Tensor(-9.0), Tensor(4.0),
                               LossWeights(alpha=0.0, beta=0.0))
    assert zero.item() == 1.5
    onfly = combined_onfly_loss(Tensor(0.0), Tensor(0.0), Tensor(0.0), Tensor(2.0), w)
    assert abs(onfly.item() - 1.0) < 1e-12
    same = combined_onfly_loss(Tensor(1.0), Tensor(-0.2), Tensor(2.0), Tensor(0.0), w)
    assert abs(same.item() - out.item()) < 1e-12
    assert combined_onfly_loss(Tensor(0.0), Tensor(0.0), Tensor(0.0), Tensor(0.0),
                               w).item() == 0.0


def test_combined_linear_in_components():
    w = LossWeights()
    base = combined_batch_loss(Tensor(1.0), Tensor(-1.0), Tensor(1.0), w).item()
    doubled = combined_batch_loss(Tensor(2.0), Tensor(-2.0), Tensor(2.0), w).item()
    assert abs(doubled - 2 * base) < 1e-12


def test_combined_rejects_nonfinite():
    with pytest.raises(ValueError):
        combined_batch_loss(Tensor(np.inf), Tensor(0.0), Tensor(0.0))


def test_weights_reject_negative():
    with pytest.raises(ValueError):
        LossWeights(alpha=-1.0)


def loss_builders(rng):
    """Small random configurations for every loss, for gradient checks."""
    T, V, F, K, N = 4, 4, 3, 3, 3

    def ctc_case():
        logits = rng.standard_normal((T, V))
        target = [int(x) for x in rng.integers(0, V - 1, size=2)]
        return {"logits": logits}, lambda p: ctc_loss(p["logits"], target)

    def kl_case():
        # modest scale keeps every pair divergence clear of the saturation kink
        arrays = {f"a{i}": rng.standard_normal((T, F)) * 0.4 for i in range(N)}
        return arrays, lambda p: kl_diversity_loss([p[f"a{i}"] for i in range(N)])

    def ce_case():
        label = int(rng.integers(0, K))
        return ({"logits": rng.standard_normal(K)},
                lambda p: ce_loss(p["logits"], label))

    def mse_case():
        return ({"a": rng.standard_normal(N), "b": rng.standard_normal(N)},
                lambda p: mse_routing_loss(p["a"], p["b"]))

    def combined_case():
        arrays = {"logits": rng.standard_normal((T, V)),
                  "a0": rng.standard_normal((T, F)) * 0.4,
                  "a1": rng.standard_normal((T, F)) * 0.4,
                  "cls": rng.standard_normal(K),
                  "r": rng.standard_normal(N),
                  "rt": rng.standard_normal(N)}
        target = [int(x) for x in rng.integers(0, V - 1, size=2)]
        label = int(rng.integers(0, K))

        def build(p):
            return combined_onfly_loss(
                ctc_loss(p["logits"], target),
                kl_diversity_loss([p["a0"], p["a1"]]),
                ce_loss(p["cls"], label),
                mse_routing_loss(p["r"], p["rt"]),
                LossWeights())
        return arrays, build

    return [ctc_case, kl_case, ce_case, mse_case, combined_case]


def test_all_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(6)
    start = time.perf_counter()
    checked = 0
    while checked < 20:
        for case in loss_builders(rng):
            arrays, build = case()
            params = {k: Tensor(v.copy(), name=k) for k, v in arrays.items()}
            analytic = ad.gradients(build(params), params)
            numeric = finite_difference(
                lambda arrs: build({k: Tensor(v) for k, v in arrs.items()}).item(),
                arrays)
            for k in arrays:
                assert rel_grad_error(analytic[k], numeric[k]) < 1e-4, (k, checked)
            checked += 1
    assert time.perf_counter() - start < 120
