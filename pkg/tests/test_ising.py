import itertools

import networkx as nx
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from bifurcate import ising
from bifurcate.errors import ConfigError, InputError
from bifurcate.nnet import gradient_check

TRIANGLE = ising.IsingInstance(3, [(0, 1), (0, 2), (1, 2)], [-1.0, -1.0, -1.0])


def brute_force(inst):
    best = None
    for bits in itertools.product([1.0, -1.0], repeat=inst.n_nodes):
        e = ising.ising_energy(inst, bits)
        best = e if best is None else min(best, e)
    return best


def test_triangle_energies():
    assert ising.ising_energy(TRIANGLE, [1, 1, 1]) == 1.5
    assert ising.ising_energy(TRIANGLE, [1, 1, -1]) == -0.5
    energies = [ising.ising_energy(TRIANGLE, s) for s in itertools.product([1, -1], repeat=3)]
    assert min(energies) == -0.5
    assert energies.count(-0.5) == 6


def test_energy_rejects_non_binary():
    with pytest.raises(InputError):
        ising.ising_energy(TRIANGLE, [1, 0.5, -1])
    with pytest.raises(InputError):
        ising.ising_energy(TRIANGLE, [1, 1])
    with pytest.raises(InputError):
        ising.relaxed_loss(TRIANGLE, [0.0, np.nan, 0.0])


def test_instance_validation():
    with pytest.raises(InputError):
        ising.IsingInstance(3, [(1, 0)], [-1.0])
    with pytest.raises(InputError):
        ising.IsingInstance(3, [(0, 1), (0, 1)], [-1.0, -1.0])
    with pytest.raises(InputError):
        ising.IsingInstance(2, [(0, 5)], [-1.0])


def test_relaxed_loss_values():
    assert ising.relaxed_loss(TRIANGLE, [0, 0, 0]) == 1.0
    assert ising.relaxed_loss(TRIANGLE, [1, 1, -1]) == pytest.approx(-0.5 / 3, abs=1e-15)


def test_relaxed_loss_gradient_vanishes_at_zero():
    gb = ising.make_graph_batch([TRIANGLE])
    s = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    ising.relaxed_loss_batch(s, gb).sum().backward()
    assert torch.all(s.grad == 0)


def test_relaxed_loss_batch_matches_scalar():
    rng = np.random.default_rng(0)
    insts = ising.gen_dataset(3, rng)
    gb = ising.make_graph_batch(insts)
    s = rng.uniform(-1, 1, gb.n_total)
    got = ising.relaxed_loss_batch(torch.as_tensor(s), gb).numpy()
    want = [ising.relaxed_loss(i, part.numpy()) for i, part in zip(insts, gb.split(torch.as_tensor(s)))]
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_energy_identity_on_binary_vectors():
    inst = ising.gen_triangular_instance(2, 3, np.random.default_rng(4))
    for bits in itertools.product([1.0, -1.0], repeat=inst.n_nodes):
        assert ising.relaxed_loss(inst, bits) == pytest.approx(ising.ising_energy(inst, bits) / inst.n_nodes,
                                                               abs=1e-12)


def test_generated_instances():
    rng = np.random.default_rng(1)
    shapes = ising.lattice_shapes()
    smallest = min(nx.triangular_lattice_graph(*s).number_of_nodes() for s in shapes)
    assert smallest >= 6
    for inst in ising.gen_dataset(30, rng):
        assert np.all((inst.J > -1.5) & (inst.J < -0.5))
        g = inst.graph()
        assert nx.is_connected(g) and nx.number_of_selfloops(g) == 0
        # frustration: every node with at least three neighbours sits on a triangle
        tri = nx.triangles(g)
        assert all(tri[v] > 0 for v in g if g.degree(v) >= 3)


def test_rounding_rule():
    np.testing.assert_array_equal(ising.round_spins([0.0, -1e-9, 0.3]), [1.0, -1.0, 1.0])


def test_exhaustive_small_cases():
    assert ising.exhaustive_ground_state(TRIANGLE).energy == -0.5
    edge = ising.IsingInstance(2, [(0, 1)], [-1.0])
    res = ising.exhaustive_ground_state(edge)
    assert res.energy == -0.5 and res.spins[0] == -res.spins[1]


def test_exhaustive_matches_brute_force():
    rng = np.random.default_rng(2)
    for inst in ising.gen_dataset(5, rng, max_nodes=12):
        res = ising.exhaustive_ground_state(inst)
        assert res.energy == pytest.approx(brute_force(inst), abs=1e-12)
        assert res.exact


def test_exhaustive_cap():
    big = ising.gen_triangular_instance(5, 8, np.random.default_rng(0))
    assert big.n_nodes > ising.EXHAUSTIVE_CAP
    with pytest.raises(ConfigError, match="anneal"):
        ising.exhaustive_ground_state(big)
    with pytest.raises(ConfigError):
        ising.label_oracle(TRIANGLE, mode="gurobi")


def test_anneal_reaches_exact_optimum():
    rng = np.random.default_rng(3)
    insts = ising.gen_dataset(20, rng, max_nodes=16)
    hits = 0
    for k, inst in enumerate(insts):
        exact = ising.exhaustive_ground_state(inst).energy
        got = ising.anneal_ground_state(inst, np.random.default_rng(100 + k), sweeps=200, restarts=2).energy
        assert got >= exact - 1e-12
        hits += abs(got - exact) < 1e-9
    assert hits >= 19


def test_gnn_spin_channel_bounded():
    model = ising.build_model("recurrent", width=8, seed=0)
    inst = ising.gen_triangular_instance(3, 4, np.random.default_rng(0))
    out = ising.infer(model, [inst], [np.full(inst.n_nodes, 50.0)], T=3)[0]
    assert np.all(np.abs(out) < 1)


def test_gnn_alpha_limits_state_change():
    inst = ising.gen_triangular_instance(3, 4, np.random.default_rng(0))
    gb = ising.make_graph_batch([inst])
    for alpha in (1.0, 0.1, 0.01):
        model = ising.RecurrentGNN(8, alpha, np.random.default_rng(1))
        x = model.initial_state(torch.as_tensor(np.random.default_rng(2).uniform(-1, 1, inst.n_nodes)))
        change = torch.linalg.norm(model.step(x, gb) - x)
        # both states live in the unit box, so the full update moves at most 2 per entry
        assert change <= alpha * 2 * np.sqrt(x.numel())
    with pytest.raises(ConfigError):
        ising.RecurrentGNN(8, 0.0)


def test_zero_parameters_converge_in_one_step():
    model = ising.build_model("recurrent", width=8)
    model.params.load(np.zeros(model.params.size))
    inst = ising.gen_triangular_instance(2, 3, np.random.default_rng(0))
    gb = ising.make_graph_batch([inst])
    x = model.initial_state(torch.as_tensor(np.random.default_rng(2).uniform(-1, 1, inst.n_nodes)))
    a = model.step(x, gb)
    assert torch.equal(model.step(a, gb), a)


def test_step_rejects_mismatched_state():
    model = ising.build_model("recurrent", width=8)
    gb = ising.make_graph_batch([TRIANGLE])
    with pytest.raises(InputError):
        model.step(torch.zeros(4, 9, dtype=torch.float64), gb)


@pytest.mark.parametrize("T", [1, 3, 10])
def test_gnn_unroll_gradient_matches_finite_differences(T):
    model = ising.build_model("recurrent", width=4, seed=3)
    inst = ising.gen_triangular_instance(2, 3, np.random.default_rng(5))
    gb = ising.make_graph_batch([inst])
    s0 = torch.as_tensor(np.random.default_rng(6).uniform(-1, 1, inst.n_nodes))

    def fn():
        fin, _ = model.unroll(model.initial_state(s0), gb, T)
        return ising.relaxed_loss_batch(fin[:, 0], gb).sum()

    chk = gradient_check(fn, model.params, n_coords=40, seed=T)
    assert chk.ok(), chk.rel_error


def test_vanilla_ignores_initialization():
    model = ising.build_model("vanilla", width=8, layers=3)
    inst = ising.gen_triangular_instance(3, 3, np.random.default_rng(0))
    a = ising.infer(model, [inst], [np.ones(inst.n_nodes)], T=10)[0]
    b = ising.infer(model, [inst], [-np.ones(inst.n_nodes)], T=1)[0]
    np.testing.assert_array_equal(a, b)
    assert ising.count_solutions(model, inst, k=20).count == 1


def test_count_solutions_single_init_and_flip_quotient():
    model = ising.build_model("recurrent", width=8)
    inst = ising.gen_triangular_instance(3, 3, np.random.default_rng(0))
    sc = ising.count_solutions(model, inst, k=1)
    assert sc.count == 1 and sc.quotient_count == 1
    sc = ising.count_solutions(model, inst, k=30)
    assert 1 <= sc.quotient_count <= sc.count <= 30
    with pytest.raises(ConfigError):
        ising.count_solutions(model, inst, k=0)


def test_sensitivity_zero_for_coupling_blind_model():
    model = ising.build_model("recurrent", width=8, seed=1)
    # silencing the message map removes every dependence on J
    with torch.no_grad():
        model.params["msg.weight"].zero_()
        model.params["msg.bias"].zero_()
    insts = ising.gen_dataset(5, np.random.default_rng(0))
    assert np.all(ising.sensitivity_ratios(model, insts) == 0.0)
    with pytest.raises(ConfigError):
        ising.sensitivity_ratios(model, insts, eps=0.0)


def test_sensitivity_percentiles_nondecreasing():
    model = ising.build_model("recurrent", width=8, seed=1)
    insts = ising.gen_dataset(12, np.random.default_rng(0))
    table = ising.sensitivity_percentiles(model, insts)
    vals = [table[p] for p in sorted(table)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_oracle_violations_none_for_untrained_model():
    model = ising.build_model("recurrent", width=8)
    insts = ising.gen_dataset(6, np.random.default_rng(7), max_nodes=16)
    viol, checked = ising.oracle_violations(model, insts, k=5)
    assert viol == 0 and checked == 6


def test_instance_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    insts = ising.gen_dataset(3, rng, max_nodes=12)
    ising.attach_labels(insts[:2], rng)
    ising.save_dataset(tmp_path, insts, "test")
    back = ising.load_dataset(tmp_path, "test")
    for a, b in zip(insts, back):
        assert a.n_nodes == b.n_nodes
        np.testing.assert_array_equal(a.edges, b.edges)
        np.testing.assert_array_equal(a.J, b.J)
        assert (a.label_spins is None) == (b.label_spins is None)
        if a.label_spins is not None:
            np.testing.assert_array_equal(a.label_spins, b.label_spins)
            assert b.label_exact


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_flip_symmetry(seed):
    rng = np.random.default_rng(seed)
    inst = ising.gen_triangular_instance(int(rng.integers(2, 5)), int(rng.integers(2, 5)), rng)
    s = rng.choice([-1.0, 1.0], inst.n_nodes)
    assert ising.ising_energy(inst, s) == ising.ising_energy(inst, -s)
