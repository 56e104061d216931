import numpy as np
import pytest

from gradcheck import numeric_grad, relative_error
from metanas import controller as ctl
from metanas.exceptions import InvalidArchitectureError
from metanas.search_space import N_OPS, ArchitectureString, Layer, enumerate_architectures, parse
from metanas.tensor import Tape


def random_policy(hidden=8, seed=0):
    return ctl.ControllerPolicy(hidden_size=hidden, rng=np.random.default_rng(seed),
                                init_range=0.5, zero_heads=False)


def test_zero_heads_sample_ops_uniformly():
    policy = ctl.ControllerPolicy(hidden_size=16, rng=np.random.default_rng(0))
    rng = np.random.default_rng(1)
    n = 10_000
    counts = np.bincount([ctl.sample(policy, 1, rng)[0].ops[0] for _ in range(n)], minlength=N_OPS)
    sigma = np.sqrt(n * (1 / 8) * (7 / 8))
    assert np.all(np.abs(counts - n / 8) < 3 * sigma)


def test_single_layer_sample_shape():
    arch, dec = ctl.sample(random_policy(), 1, np.random.default_rng(0))
    assert arch.n_layers == 1 and arch.layers[0].skips == ()
    assert dec.n_decisions == 1


@pytest.mark.parametrize("n", [2, 3, 5, 8])
def test_decision_count(n):
    _, dec = ctl.sample(random_policy(), n, np.random.default_rng(n))
    assert dec.n_decisions == n + n * (n - 1) // 2
    assert dec.total == pytest.approx(sum(dec.log_probs), abs=1e-12)


def test_forced_logit_dominates():
    policy = ctl.ControllerPolicy(hidden_size=8, rng=np.random.default_rng(0))
    policy.params["op_b"].data[2] = 10.0
    # softmax oracle: e^10 / (e^10 + 7) ~ 0.99968
    expected = np.exp(10) / (np.exp(10) + 7)
    assert expected > 0.999
    rng = np.random.default_rng(3)
    freq = np.mean([ctl.sample(policy, 1, rng)[0].ops[0] == 2 for _ in range(5000)])
    assert freq > 0.999
    np.testing.assert_allclose(ctl.op_probabilities(policy)[2], expected, rtol=1e-12)


def test_log_prob_normalizes_single_layer():
    policy = random_policy()
    total = sum(np.exp(ctl.log_prob(policy, ArchitectureString((Layer(op),))).item())
                for op in range(N_OPS))
    assert total == pytest.approx(1.0, abs=1e-6)


def test_log_prob_normalizes_over_depth_three():
    policy = random_policy(seed=4)
    total = sum(np.exp(ctl.log_prob(policy, a).item()) for a in enumerate_architectures(3))
    assert total == pytest.approx(1.0, abs=1e-5)


@pytest.mark.parametrize("seed", range(5))
def test_log_prob_matches_sampling_record(seed):
    policy = random_policy(seed=seed)
    arch, dec = ctl.sample(policy, 4, np.random.default_rng(seed))
    assert ctl.log_prob(policy, arch).item() == pytest.approx(dec.total, abs=1e-9)


def test_log_prob_depth_mismatch():
    with pytest.raises(InvalidArchitectureError):
        ctl.log_prob(random_policy(), parse("conv3; conv5 skips=0"), n_layers=3)


def controller_fd_error(policy, arch):
    params = policy.parameters()
    with Tape() as tape:
        lp = ctl.log_prob(policy, arch)
    analytic = tape.gradient(lp, params)
    worst = 0.0
    for i, p in enumerate(params):
        def fn(arrays, p=p):
            return ctl.log_prob(policy, arch).item()
        num = numeric_grad(fn, [p.data], 0)
        worst = max(worst, relative_error(analytic[i], num))
    return worst


@pytest.mark.parametrize("seed", range(10))
def test_log_prob_gradient_matches_finite_differences(seed):
    policy = random_policy(hidden=8, seed=seed)
    arch, _ = ctl.sample(policy, 2, np.random.default_rng(100 + seed))
    assert controller_fd_error(policy, arch) < 1e-3


def test_sampling_is_reproducible():
    policy = random_policy()
    a = [ctl.sample(policy, 4, np.random.default_rng(7)) for _ in range(2)]
    assert a[0][0] == a[1][0] and a[0][1] == a[1][1]


def test_op_logit_monotonicity():
    policy = random_policy()
    arch = ArchitectureString((Layer(5),))
    before = ctl.log_prob(policy, arch).item()
    policy.params["op_b"].data[5] += 0.3
    assert ctl.log_prob(policy, arch).item() > before


def test_entropy_estimates():
    rng = np.random.default_rng(0)
    uniform = ctl.ControllerPolicy(hidden_size=8, rng=rng)
    assert ctl.entropy_estimate(uniform, 1, 200, rng) == pytest.approx(np.log(8), abs=1e-9)
    assert ctl.entropy_estimate(uniform, 3, 200, rng) == pytest.approx(np.log(4096), abs=1e-9)
    peaked = ctl.ControllerPolicy(hidden_size=8, rng=rng)
    peaked.params["op_b"].data[:] = -40.0
    peaked.params["op_b"].data[0] = 40.0
    peaked.params["skip_b"].data[:] = 40.0
    assert ctl.entropy_estimate(peaked, 3, 50, rng) < 1e-12


def test_skip_probabilities_in_open_interval():
    policy = random_policy()
    policy.params["skip_b"].data[:] = 700.0
    arch, dec = ctl.sample(policy, 3, np.random.default_rng(0))
    assert all(np.isfinite(dec.log_probs))


def test_checkpoint_roundtrip(tmp_path):
    policy = random_policy()
    policy.save(tmp_path / "ctl.bin")
    loaded = ctl.ControllerPolicy.load(tmp_path / "ctl.bin")
    for a, b in zip(policy.parameters(), loaded.parameters()):
        assert a.data.tobytes() == b.data.tobytes()
