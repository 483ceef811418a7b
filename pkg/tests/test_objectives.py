import math

import hypothesis.strategies as st
import numpy as np
import pytest
import torch
from hypothesis import given

from imbssl.errors import DegenerateInputError
from imbssl.objectives import (
    ContrastiveConfig,
    distill_loss,
    distill_terms,
    nt_xent,
    pair_rows,
    simsiam_loss,
    stop_gradient,
)
from imbssl.oracles import distill_direct, finite_diff_grad, nt_xent_bruteforce, simsiam_direct

from .tolerances import TOLERANCES

STEP = TOLERANCES["finite_diff_step"]


def rand(*shape, seed=0, dtype=torch.float64):
    return torch.from_numpy(np.random.default_rng(seed).normal(size=shape)).to(dtype)


# --- values vs oracles -----------------------------------------------------


@given(st.integers(1, 8), st.integers(2, 16), st.integers(0, 10_000), st.floats(0.1, 2.0))
def test_nt_xent_matches_bruteforce(B, d, seed, tau):
    Z = rand(2 * B, d, seed=seed, dtype=torch.float32)
    got = float(nt_xent(Z, tau))
    assert abs(got - nt_xent_bruteforce(Z.numpy(), tau)) < TOLERANCES["nt_xent_vs_bruteforce"]


def test_nt_xent_single_pair_is_zero():
    assert float(nt_xent(torch.tensor([[1.0, 2.0], [-3.0, 0.5]]))) == pytest.approx(0.0, abs=1e-7)


def test_nt_xent_symmetric_case():
    # two samples whose views coincide: each anchor sees its positive, the
    # other sample twice, all at similarity 1 -> loss = log(3)
    Z = torch.tensor([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    assert float(nt_xent(Z, 0.5)) == pytest.approx(math.log(3), abs=1e-6)
    assert nt_xent_bruteforce(Z.numpy(), 0.5) == pytest.approx(math.log(3), abs=1e-12)


@given(st.integers(1, 6), st.floats(0.01, 100.0), st.integers(0, 1000))
def test_nt_xent_scale_invariance(B, alpha, seed):
    Z = rand(2 * B, 5, seed=seed)
    torch.testing.assert_close(nt_xent(alpha * Z), nt_xent(Z))


def test_pair_rows_interleaves():
    a, b = torch.zeros(3, 2), torch.ones(3, 2)
    assert pair_rows(a, b)[:, 0].tolist() == [0, 1, 0, 1, 0, 1]


@given(st.integers(1, 6), st.integers(2, 8), st.integers(0, 10_000))
def test_simsiam_matches_direct(B, d, seed):
    p1, p2, z1, z2 = (rand(B, d, seed=seed + i) for i in range(4))
    got = float(simsiam_loss(p1, p2, z1, z2))
    assert abs(got - simsiam_direct(p1, p2, z1, z2)) < TOLERANCES["simsiam_vs_direct"]
    assert -1 - 1e-12 <= got <= 1 + 1e-12


@given(st.integers(1, 6), st.integers(0, 1000))
def test_simsiam_symmetry(B, seed):
    p1, p2, z1, z2 = (rand(B, 4, seed=seed + i) for i in range(4))
    torch.testing.assert_close(simsiam_loss(p1, p2, z1, z2), simsiam_loss(p2, p1, z2, z1))


def test_simsiam_examples():
    z = rand(3, 4, seed=1)
    assert float(simsiam_loss(z, z, z, z)) == pytest.approx(-1.0)
    p = torch.tensor([[1.0, 0.0], [0.0, 2.0]])
    q = torch.tensor([[0.0, 5.0], [3.0, 0.0]])
    assert float(simsiam_loss(p, p, q, q)) == pytest.approx(0.0)


@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 10_000))
def test_distill_matches_direct(B, d, seed):
    args = [rand(B, d, seed=seed + i) for i in range(4)]
    assert abs(float(distill_loss(*args)) - distill_direct(*args)) < TOLERANCES["distill_vs_direct"]


def test_distill_examples():
    q = rand(4, 3)
    assert float(distill_loss(q, q + 1, q, q + 1)) == 0.0
    assert float(distill_loss(torch.zeros(2, 2), torch.zeros(2, 2), torch.ones(2, 2), torch.ones(2, 2))) == 1.0
    base, expert = distill_terms(torch.zeros(2, 2), torch.zeros(2, 2), torch.ones(2, 2), 2 * torch.ones(2, 2))
    assert (float(base), float(expert)) == (0.5, 2.0)


def test_errors():
    with pytest.raises(DegenerateInputError):
        nt_xent(torch.tensor([[0.0, 0.0], [1.0, 0.0]]))
    with pytest.raises(DegenerateInputError):
        simsiam_loss(torch.zeros(1, 2), torch.ones(1, 2), torch.ones(1, 2), torch.ones(1, 2))
    with pytest.raises(ValueError):
        nt_xent(torch.ones(3, 2))
    with pytest.raises(ValueError):
        distill_loss(torch.ones(2, 3), torch.ones(2, 3), torch.ones(2, 3), torch.ones(3, 3))
    with pytest.raises(ValueError):
        ContrastiveConfig(0.0)


# --- gradients -------------------------------------------------------------


def analytic(fn, inputs):
    leaves = [x.clone().requires_grad_(True) for x in inputs]
    fn(*leaves).backward()
    return [x.grad if x.grad is not None else torch.zeros_like(x) for x in leaves]


def max_rel_error(got, ref):
    got, ref = np.asarray(got), np.asarray(ref)
    return float(np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1e-6)))


@pytest.mark.parametrize("seed", range(5))
def test_nt_xent_gradient(seed):
    Z = rand(6, 4, seed=seed)
    (g,) = analytic(lambda z: nt_xent(z, 0.5), [Z])
    (fd,) = finite_diff_grad(lambda z: float(nt_xent(torch.from_numpy(z), 0.5)), [Z.numpy()], STEP)
    assert max_rel_error(g, fd) < TOLERANCES["grad_vs_finite_diff"]


@pytest.mark.parametrize("seed", range(5))
def test_simsiam_gradient_and_stop_gradient(seed):
    p1, p2, z1, z2 = (rand(3, 8, seed=10 * seed + i) for i in range(4))
    gp1, gp2, gz1, gz2 = analytic(simsiam_loss, [p1, p2, z1, z2])
    # predictor branch: targets held fixed, as the stop-gradient prescribes
    fd1, fd2 = finite_diff_grad(lambda a, b: float(simsiam_loss(torch.from_numpy(a), torch.from_numpy(b), z1, z2)),
                                [p1.numpy(), p2.numpy()], STEP)
    assert max_rel_error(gp1, fd1) < TOLERANCES["grad_vs_finite_diff"]
    assert max_rel_error(gp2, fd2) < TOLERANCES["grad_vs_finite_diff"]
    assert torch.count_nonzero(gz1) == 0 and torch.count_nonzero(gz2) == 0


@pytest.mark.parametrize("seed", range(5))
def test_distill_gradient_and_stop_gradient(seed):
    rb, re, qb, qe = (rand(4, 8, seed=10 * seed + i) for i in range(4))
    g_rb, g_re, g_qb, g_qe = analytic(distill_loss, [rb, re, qb, qe])
    fd_rb, fd_re = finite_diff_grad(lambda a, b: float(distill_loss(torch.from_numpy(a), torch.from_numpy(b), qb, qe)),
                                    [rb.numpy(), re.numpy()], STEP)
    assert max_rel_error(g_rb, fd_rb) < TOLERANCES["grad_vs_finite_diff"]
    assert max_rel_error(g_re, fd_re) < TOLERANCES["grad_vs_finite_diff"]
    assert torch.count_nonzero(g_qb) == 0 and torch.count_nonzero(g_qe) == 0


def backprop_signal(loss_fn, inputs, branch):
    """Scalar <dL/d inputs[branch], 1> as computed by autograd."""
    leaves = [x.clone().requires_grad_(True) for x in inputs]
    (g,) = torch.autograd.grad(loss_fn(*leaves), leaves[branch], allow_unused=True, materialize_grads=True)
    return float(g.sum())


@pytest.mark.parametrize("loss_fn,stopped", [(simsiam_loss, (2, 3)), (distill_loss, (2, 3))])
def test_stop_gradient_numerical_sensitivity(loss_fn, stopped):
    # The update direction reaching a stopped input must not move when that
    # input is perturbed: central differences of the backpropagated signal.
    inputs = [rand(3, 5, seed=i) for i in range(4)]
    for branch in stopped:
        def signal(x, branch=branch):
            args = list(inputs)
            args[branch] = torch.from_numpy(x)
            return backprop_signal(loss_fn, args, branch)
        (fd,) = finite_diff_grad(signal, [inputs[branch].numpy()], STEP)
        assert np.abs(fd).max() < TOLERANCES["stop_grad_sensitivity"]


def test_stop_gradient_value_identity():
    x = rand(2, 3).requires_grad_(True)
    y = stop_gradient(x)
    assert torch.equal(y, x) and not y.requires_grad
