import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dash_grn import simulator as sim
from dash_grn.errors import ConfigurationError, ContractError
from dash_grn.evaluation import balanced_accuracy


def test_two_gene_network():
    net = sim.generate_network(2, 1, seed=0)
    assert net.n_edges == 2
    assert net.density == 0.5
    assert np.all(np.diag(net.A) == 0)


@pytest.mark.parametrize("seed", range(5))
def test_network_properties(seed):
    net = sim.generate_network(50, 3, seed=seed)
    assert net.n_edges == 150
    assert np.all(np.diag(net.A) == 0)
    assert net.gene_names[0] == "G01" and net.gene_names[-1] == "G50"
    out_deg = np.count_nonzero(net.A, axis=0)
    # heavy tail: a few hubs, many genes without targets
    assert out_deg.max() > 3 * out_deg.mean()
    assert np.sum(out_deg == 0) > 10


def test_sign_fraction_and_determinism():
    net = sim.generate_network(30, 2, sign_fraction=1.0, seed=3)
    assert not np.any(net.A < 0)
    np.testing.assert_array_equal(net.A, sim.generate_network(30, 2, sign_fraction=1.0, seed=3).A)


def test_generator_rejects_infeasible_requests():
    with pytest.raises(ConfigurationError):
        sim.generate_network(1, 1)
    with pytest.raises(ConfigurationError):
        sim.generate_network(5, 0.5)
    with pytest.raises(ConfigurationError):
        sim.generate_network(5, 5)
    with pytest.raises(ConfigurationError):
        sim.generate_network(10, 3, max_density=0.1)


def test_empty_network_relaxes_to_half():
    net = sim.GroundTruthNetwork(["G1"], np.zeros((1, 1)))
    times = (0.0, 1.0, 2.5)
    ds = sim.simulate_dataset(net, 3, times=times, noise_sigma=0.0, seed=4)
    for traj in ds.states:
        g0 = traj[0, 0]
        np.testing.assert_allclose(traj[:, 0], 0.5 + (g0 - 0.5) * np.exp(-np.array(times)), atol=1e-9)


def test_simulation_is_deterministic_and_bounded():
    net = sim.generate_network(12, 2, seed=1)
    a = sim.simulate_dataset(net, 20, noise_sigma=0.0, seed=9)
    b = sim.simulate_dataset(net, 20, noise_sigma=0.0, seed=9)
    assert a.states.tobytes() == b.states.tobytes()
    noisy = sim.simulate_dataset(net, 20, noise_sigma=0.5, seed=9)
    assert noisy.states.min() >= 0 and noisy.states.max() <= 1
    # noise only touches non-initial observations
    np.testing.assert_array_equal(noisy.states[:, 0], a.states[:, 0])


def test_mean_expression_near_half():
    net = sim.generate_network(50, 3, seed=0)
    ds = sim.simulate_dataset(net, 160, seed=1)
    assert abs(ds.states.mean() - 0.5) < 0.1


def test_trajectory_streams_are_independent_of_count():
    net = sim.generate_network(8, 2, seed=2)
    few = sim.simulate_dataset(net, 3, seed=5)
    many = sim.simulate_dataset(net, 10, seed=5)
    np.testing.assert_array_equal(few.states, many.states[:3])


# -- corruption -------------------------------------------------------------------


def test_zero_corruption_is_identity():
    A = sim.generate_network(10, 2, seed=0).A
    np.testing.assert_array_equal(sim.corrupt_network(A, 0, seed=1), A)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), sigma=st.floats(0, 100))
def test_corruption_preserves_edges(seed, sigma):
    A = sim.generate_network(15, 2, seed=seed % 50).A
    B = sim.corrupt_network(A, sigma, seed=seed)
    assert np.count_nonzero(B) == np.count_nonzero(A)
    assert np.all(np.diag(B) == 0)
    assert sorted(B[B != 0]) == sorted(A[A != 0])
    moved = int(np.ceil(sigma / 100 * 30 - 1e-9))
    assert np.count_nonzero((A != 0) & (B == 0)) <= moved


def test_full_corruption_overlap_matches_enumeration():
    A = np.zeros((3, 3))
    A[0, 1] = A[2, 0] = 1.0
    off = [i for i in range(9) if i % 4 != 0]
    edges = set(np.flatnonzero(A))
    # every edge is lifted, so the new support is a uniform 2-subset of the 6 off-diagonal slots
    subsets = list(itertools.combinations(off, 2))
    expected = np.mean([len(edges & set(s)) for s in subsets])
    assert expected == pytest.approx(2 * 2 / 6)
    observed = np.mean([np.count_nonzero((sim.corrupt_network(A, 100, seed=s) != 0) & (A != 0))
                        for s in range(3000)])
    assert observed == pytest.approx(expected, abs=0.04)


def test_corruption_deterministic_and_validated():
    A = sim.generate_network(10, 2, seed=0).A
    np.testing.assert_array_equal(sim.corrupt_network(A, 40, seed=3), sim.corrupt_network(A, 40, seed=3))
    with pytest.raises(ContractError):
        sim.corrupt_network(A, 120)


# -- priors -----------------------------------------------------------------------


def test_priors_of_empty_network():
    pri = sim.build_priors(np.zeros((4, 4)))
    assert not pri.P.any() and not pri.C.any()


def test_single_edge_prior():
    A = np.zeros((3, 3))
    A[2, 0] = -1.0
    pri = sim.build_priors(A)
    np.testing.assert_array_equal(pri.P, np.abs(A))
    expected = np.zeros((3, 3))
    expected[2, 2] = 1.0
    np.testing.assert_array_equal(pri.C, expected)


def test_clean_prior_support_and_self_consistency():
    net = sim.generate_network(20, 2, seed=4)
    pri = sim.make_priors(net, 0.0, seed=1)
    np.testing.assert_array_equal(pri.P != 0, net.A != 0)
    assert balanced_accuracy(pri.P, net.A) == 100.0


def test_corrupted_priors_keep_counts():
    net = sim.generate_network(20, 2, seed=4)
    clean = sim.make_priors(net, 0.0, seed=1)
    noisy = sim.make_priors(net, 20.0, seed=1)
    assert noisy.P.sum() == clean.P.sum()
    # C is rebuilt from the corrupted P, then corrupted again without changing its count
    assert noisy.C.sum() == ((noisy.P @ noisy.P.T) > 0).sum()
    assert not np.array_equal(noisy.P, clean.P)


# -- splits -----------------------------------------------------------------------


@pytest.mark.parametrize("n, counts", [(100, (88, 6, 6)), (160, (140, 10, 10))])
def test_split_counts(n, counts):
    assert sim.split_counts(n) == counts


@settings(max_examples=20, deadline=None)
@given(n=st.integers(1, 60), seed=st.integers(0, 1000))
def test_split_is_disjoint_cover(n, seed):
    net = sim.GroundTruthNetwork(["a", "b"], np.zeros((2, 2)))
    ds = sim.simulate_dataset(net, n, times=(0.0, 1.0), noise_sigma=0.0, seed=0, n_sub=2)
    parts = sim.split_dataset(ds, seed=seed)
    ids = [i for p in parts for i in p.traj_ids]
    assert sorted(ids) == sorted(ds.traj_ids)
    assert [p.split for p in parts] == ["train", "val", "test"]
    again = sim.split_dataset(ds, seed=seed)
    assert [p.traj_ids for p in parts] == [p.traj_ids for p in again]


def test_split_rejects_bad_fractions():
    with pytest.raises(ContractError):
        sim.split_counts(10, (0.5, 0.5, 0.5))
