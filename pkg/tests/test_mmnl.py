import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dqmix.dqgen import generate_dq
from dqmix.mmnl import (
    ChoiceDataset,
    DatasetError,
    MmnlParams,
    conditional_likelihood,
    fit,
    individual_scores,
    load_dataset,
    logit_prob,
    save_dataset,
    simulated_loglik,
    simulated_loglik_gradient,
)
from dqmix.multiindex import tensor_rule
from dqmix.qmc import make_draws


def _toy(N=50, T=5, J=5, p=1, d=3, seed=0, chosen=None):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (N, T, J, p))
    Z = rng.uniform(-1, 1, (N, T, J, d))
    ch = rng.integers(0, J, (N, T)) if chosen is None else chosen
    return ChoiceDataset(X, Z, ch)


def _mnl_data(N, seed, alpha, gamma):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (N, 4, 3, len(alpha)))
    Z = rng.uniform(-1, 1, (N, 4, 3, len(gamma)))
    u = X @ alpha + Z @ gamma + rng.gumbel(size=(N, 4, 3))
    return ChoiceDataset(X, Z, u.argmax(axis=2))


def _mnl_newton(data):
    """Plain multinomial logit by Newton's method on stacked covariates."""
    W = np.concatenate([data.X, data.Z], axis=3).reshape(-1, data.J, data.n_fixed + data.n_random)
    y = data.chosen.reshape(-1)
    b = np.zeros(W.shape[2])
    for _ in range(50):
        v = W @ b
        P = np.exp(v - v.max(axis=1, keepdims=True))
        P /= P.sum(axis=1, keepdims=True)
        wbar = np.einsum("oj,ojk->ok", P, W)
        g = (W[np.arange(len(y)), y] - wbar).sum(axis=0)
        dev = W - wbar[:, None, :]
        H = np.einsum("oj,ojk,ojl->kl", P, dev, dev)
        step = np.linalg.solve(H, g)
        b += step
        if np.max(np.abs(step)) < 1e-14:
            break
    return b


def test_logit_prob_examples():
    np.testing.assert_allclose(logit_prob(np.zeros(5)), np.full(5, 0.2), rtol=1e-15)
    np.testing.assert_allclose(logit_prob([math.log(2), 0.0]), [2 / 3, 1 / 3], rtol=1e-15)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(-1e3, 1e3))
def test_logit_prob_shift_invariant_and_normalized(u, c):
    p = logit_prob(u)
    assert np.all(p > 0) or np.ptp(u) > 700
    assert abs(p.sum() - 1) < 1e-14
    np.testing.assert_allclose(logit_prob(np.array(u) + c), p, rtol=1e-9, atol=1e-300)


def test_logit_prob_no_overflow():
    p = logit_prob([1000.0, 999.0])
    assert np.all(np.isfinite(p))


def test_conditional_likelihood_examples():
    data = _toy(N=1, T=5, J=5, p=1, d=2)
    zero = ChoiceDataset(np.zeros_like(data.X), np.zeros_like(data.Z), data.chosen)
    assert conditional_likelihood(zero, [0.7], [1.0, -2.0]) == pytest.approx(0.2**5, rel=1e-14)
    one = data.subset(slice(0, 1))
    alpha, beta = np.array([0.4]), np.array([0.3, -0.5])
    v = one.X[0] @ alpha + one.Z[0] @ beta
    expected = np.prod([logit_prob(v[t])[one.chosen[0, t]] for t in range(one.T)])
    assert conditional_likelihood(one, alpha, beta) == pytest.approx(expected, rel=1e-13)


def test_single_node_rule_is_plain_likelihood():
    data = _toy(N=20, d=2)
    params = MmnlParams([0.5], [0.2, -0.3], [[0.4, 0], [0.1, 0.3]])
    origin = tensor_rule("normal", 2, 1)
    expected = sum(math.log(conditional_likelihood(data.subset(slice(i, i + 1)), params.alpha, params.gamma))
                   for i in range(data.N))
    assert simulated_loglik(data, params, origin) == pytest.approx(expected, rel=1e-13)


@pytest.mark.parametrize("make_rule", [
    lambda: tensor_rule("normal", 2, 5),
    lambda: make_draws("halton", 2, 20, 50, seed=1),
    lambda: make_draws("mlhs", 2, 20, 50, seed=1),
])
def test_zero_cholesky_collapses_to_one_node(make_rule):
    data = _toy(N=20, d=2)
    params = MmnlParams([0.5], [0.2, -0.3], np.zeros((2, 2)))
    one = simulated_loglik(data, params, tensor_rule("normal", 2, 1))
    assert simulated_loglik(data, params, make_rule()) == pytest.approx(one, rel=1e-14)


def test_loglik_is_negative_and_probabilities_in_unit_interval():
    data = _toy(N=30, d=3)
    rng = np.random.default_rng(1)
    rule = generate_dq("normal", 3, 4, 12, seed=0)
    for _ in range(5):
        params = MmnlParams.from_vector(rng.normal(size=1 + 3 + 6), 1, 3)
        ll, probs = simulated_loglik(data, params, rule, return_probs=True)
        assert ll < 0 and math.isfinite(ll)
        assert np.all((probs > 0) & (probs < 1))


def test_dq_matches_tensor_oracle_in_2d():
    data = _toy(N=40, T=2, J=3, d=2, seed=4)
    params = MmnlParams([0.8], [1.0, -1.0], [[0.6, 0.0], [0.2, 0.5]])
    dq = generate_dq("normal", 2, 13, 40, seed=0)
    oracle = tensor_rule("normal", 2, 20)
    assert abs(simulated_loglik(data, params, dq) - simulated_loglik(data, params, oracle)) < 1e-4


def test_tensor_accuracy_stabilizes():
    data = _toy(N=40, d=2, seed=5)
    params = MmnlParams([0.8], [1.0, -1.0], [[1.0, 0.0], [0.5, 0.8]])
    reference = simulated_loglik(data, params, tensor_rule("normal", 2, 20))
    errors = [abs(simulated_loglik(data, params, tensor_rule("normal", 2, n)) - reference) for n in (2, 4, 6, 8)]
    assert all(a > b for a, b in zip(errors, errors[1:]))


def _fd_gradient(data, theta, rule, structure, h=1e-5):
    p, d = data.n_fixed, data.n_random
    out = np.empty_like(theta)
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = h
        hi = simulated_loglik(data, MmnlParams.from_vector(theta + e, p, d, structure), rule)
        lo = simulated_loglik(data, MmnlParams.from_vector(theta - e, p, d, structure), rule)
        out[k] = (hi - lo) / (2 * h)
    return out


@pytest.mark.parametrize("structure", ["full", "diagonal"])
def test_gradient_matches_finite_differences(structure):
    data = _toy(N=50, d=3, seed=2)
    rule = generate_dq("normal", 3, 6, 30, seed=0)
    rng = np.random.default_rng(8)
    k = 1 + 3 + (6 if structure == "full" else 3)
    for _ in range(5):
        theta = rng.normal(scale=0.7, size=k)
        g = simulated_loglik_gradient(data, MmnlParams.from_vector(theta, 1, 3, structure), rule, structure)
        fd = _fd_gradient(data, theta, rule, structure)
        assert np.max(np.abs(g - fd)) <= 1e-6 * max(1.0, np.max(np.abs(g)))


def test_gradient_with_per_individual_draws():
    data = _toy(N=30, d=2, seed=3)
    draws = make_draws("halton-scrambled", 2, 30, 40, seed=5)
    theta = np.array([0.3, 0.5, -0.4, 0.6, 0.2, 0.7])
    g = simulated_loglik_gradient(data, MmnlParams.from_vector(theta, 1, 2), draws)
    np.testing.assert_allclose(g, _fd_gradient(data, theta, draws, "full"), rtol=1e-6, atol=1e-6)


def test_scores_sum_to_gradient_and_constant_covariate_drops_out():
    data = _toy(N=25, d=2)
    X = data.X.copy()
    X[..., 0] = 3.0  # same for every alternative
    const = ChoiceDataset(X, data.Z, data.chosen)
    params = MmnlParams([0.4], [0.2, 0.1], [[0.5, 0], [0.3, 0.2]])
    rule = tensor_rule("normal", 2, 4)
    scores = individual_scores(const, params, rule)
    g = simulated_loglik_gradient(const, params, rule)
    np.testing.assert_allclose(scores.sum(axis=0), g, rtol=1e-13, atol=1e-13)
    assert abs(g[0]) < 1e-12


def test_off_diagonal_gradient_vanishes_by_symmetry():
    # every covariate vector appears with both signs of z_2, so the loglik is even in L21
    base = _toy(N=10, d=2, seed=6)
    Z2 = base.Z.copy()
    Z2[..., 1] *= -1
    data = ChoiceDataset(np.concatenate([base.X, base.X]), np.concatenate([base.Z, Z2]),
                         np.concatenate([base.chosen, base.chosen]))
    params = MmnlParams([0.3], [0.5, 0.0], np.zeros((2, 2)))
    g = simulated_loglik_gradient(data, params, tensor_rule("normal", 2, 3))
    assert abs(g[-2]) < 1e-12  # L21


def test_underflow_is_clamped_and_counted():
    data = _toy(N=3, T=5, J=5, d=1)
    Z = data.Z * 1e4
    extreme = ChoiceDataset(data.X, Z, data.chosen)
    params = MmnlParams([0.0], [50.0], [[0.0]])
    ll, probs = simulated_loglik(extreme, params, tensor_rule("normal", 1, 1), return_probs=True)
    assert math.isfinite(ll)
    assert np.all(probs >= 1e-300)


def test_fit_recovers_plain_mnl():
    alpha, gamma = np.array([1.0]), np.array([0.5, -1.0])
    data = _mnl_data(300, 11, alpha, gamma)
    res = fit(data, tensor_rule("normal", 2, 1), structure="diagonal")
    assert res.converged
    expected = _mnl_newton(data)
    np.testing.assert_allclose(np.concatenate([res.params.alpha, res.params.gamma]), expected, atol=1e-6)
    assert res.loglik < 0 and res.loglik_evaluations >= 1


def test_fit_is_invariant_to_individual_order():
    data = _toy(N=60, d=2, seed=9)
    rule = tensor_rule("normal", 2, 3)
    perm = np.random.default_rng(0).permutation(data.N)
    a = fit(data, rule, max_iter=40)
    b = fit(data.subset(perm), rule, max_iter=40)
    assert abs(a.loglik - b.loglik) <= 1e-10 * abs(a.loglik)


def test_fit_trace_is_monotone_and_covariance_psd():
    truth = MmnlParams([1.0], [1.0, -1.0], [[1.0, 0.0], [0.5, 0.8]])
    rng = np.random.default_rng(12)
    X = rng.uniform(-1, 1, (200, 5, 4, 1))
    Z = rng.uniform(-1, 1, (200, 5, 4, 2))
    beta = truth.gamma + rng.standard_normal((200, 2)) @ truth.chol.T
    u = X @ truth.alpha + np.einsum("ntjk,nk->ntj", Z, beta) + rng.gumbel(size=(200, 5, 4))
    data = ChoiceDataset(X, Z, u.argmax(axis=2))
    res = fit(data, generate_dq("normal", 2, 7, 14, seed=0))
    assert res.converged
    assert all(b >= a for a, b in zip(res.trace, res.trace[1:]))
    cov = res.params.covariance
    assert np.max(np.abs(cov - cov.T)) <= 1e-14
    assert np.min(np.linalg.eigvalsh(cov)) >= -1e-10
    assert np.all(np.isfinite(res.standard_errors))
    report = res.report()
    assert "loglik_evaluations" in report and "wall_time" not in report
    assert "wall_time_seconds" in res.report(timing=True)


def test_fit_rejects_non_finite_start():
    data = _toy(N=5, d=1)
    with pytest.raises(ValueError):
        fit(data, tensor_rule("normal", 1, 2), start=MmnlParams([math.nan], [0.0], [[0.1]]))


def test_dataset_validation():
    data = _toy(N=2, d=1)
    with pytest.raises(DatasetError):
        ChoiceDataset(data.X, data.Z, np.full((2, 5), 7))
    with pytest.raises(DatasetError):
        ChoiceDataset(data.X, data.Z[:1], data.chosen)


def test_dataset_round_trip(tmp_path):
    data = _toy(N=4, T=3, J=4, p=2, d=3)
    path = save_dataset(data, tmp_path / "choices.csv")
    back = load_dataset(path)
    assert back.X.tobytes() == data.X.tobytes()
    assert back.Z.tobytes() == data.Z.tobytes()
    np.testing.assert_array_equal(back.chosen, data.chosen)
    lines = path.read_text().splitlines()
    assert lines[0] == "person_id,task_id,alt_id,chosen,x_1,x_2,z_1,z_2,z_3"
    assert len(lines) == 1 + 4 * 3 * 4


def _edit(path, lineno, fn):
    lines = path.read_text().splitlines()
    lines[lineno - 1] = fn(lines[lineno - 1])
    path.write_text("\n".join(lines) + "\n")


def test_dataset_errors_name_the_line(tmp_path):
    data = _toy(N=2, T=2, J=3, d=1)
    path = save_dataset(data, tmp_path / "d.csv")
    original = path.read_text()

    # a second chosen alternative in the first task
    lines = original.splitlines()
    chosen_col = [ln.split(",")[3] for ln in lines[1:4]]
    other = chosen_col.index("0") + 2
    _edit(path, other, lambda s: ",".join(s.split(",")[:3] + ["1"] + s.split(",")[4:]))
    with pytest.raises(DatasetError, match="2 chosen"):
        load_dataset(path)

    path.write_text(original)
    _edit(path, 5, lambda s: s + ",0.5")
    with pytest.raises(DatasetError, match=r"d\.csv:5:"):
        load_dataset(path)

    path.write_text(original)
    _edit(path, 3, lambda s: s.replace(s.split(",")[-1], "abc"))
    with pytest.raises(DatasetError, match=r":3: non-numeric"):
        load_dataset(path)

    path.write_text("\n".join(original.splitlines()[:-1]) + "\n")
    with pytest.raises(DatasetError, match="alternatives"):
        load_dataset(path)

    path.write_text("person_id,task_id,alt_id,chosen,z_1,x_1\n")
    with pytest.raises(DatasetError, match=":1:"):
        load_dataset(path)
