from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from distid.datamodel import IoDataset, Partition, assemble_global, lift_all, split_views, vec
from distid.graph import dense_D, laplacian, laplacian_sqrt, preset
from distid.oracle import least_squares
from distid.solver import (AdamConfig, CertificateConfig, CertificateWarning, DivergenceError, InitSpec,
                           ZFingerprint, adam_step, baseline_step, init_state, kkt_residual, run,
                           step_size_certificate, x_blocks_to_matrix)
from conftest import random_instance


def setup(rng, n_agents=3, T=None, exact=True, graph="ring"):
    ds, part, A = random_instance(rng, n_agents, 2, 2, T=T, exact=exact)
    views = split_views(ds, part)
    return ds, part, A, views, preset(graph, part.n_agents), lift_all(views, part)


def stack(states, attr="z"):
    return np.concatenate([getattr(s, attr) for s in states])


def test_config_validation():
    for bad in (dict(alpha=0), dict(beta1=1.0), dict(beta2=-0.1), dict(epsilon=0), dict(iters=-1)):
        with pytest.raises(ValueError):
            AdamConfig(**bad)
    with pytest.raises(ValueError):
        CertificateConfig(mu=0)


def test_init_zero_gives_minus_y(rng):
    ds, part, A, views, g, blocks = setup(rng)
    for s, b in zip(init_state(views, part, g, InitSpec.zeros(part)), blocks):
        np.testing.assert_array_equal(s.z, -b.Y_lift)
        assert not s.s1.any() and not s.s2.any() and s.k == 0


def test_init_rejects_disconnected_and_mismatch(rng):
    ds, part, A, views, g, blocks = setup(rng)
    with pytest.raises(ValueError, match="connected"):
        init_state(views, part, laplacian([(0, 1)], 3), InitSpec.zeros(part))
    with pytest.raises(ValueError, match="nodes"):
        init_state(views, part, preset("ring", 4), InitSpec.zeros(part))
    with pytest.raises(ValueError, match="length"):
        init_state(views, part, g, InitSpec(tuple(np.zeros(1) for _ in range(3))))


def test_single_agent_exact_solution_is_stationary(rng):
    ds, part, A, views, g, blocks = setup(rng, n_agents=1)
    init = InitSpec((vec(A),))
    states = init_state(views, part, g, init)
    assert np.abs(states[0].z).max() < 1e-12
    cfg = AdamConfig(iters=5)
    for step in (lambda s: baseline_step(s, g, blocks, 1e-3), lambda s: adam_step(s, g, blocks, cfg)):
        out = step(states)
        np.testing.assert_allclose(out[0].x, states[0].x, atol=1e-12)
        np.testing.assert_allclose(out[0].z, states[0].z, atol=1e-12)


def test_init_with_slack_matches_dense(rng):
    ds, part, A, views, g, blocks = setup(rng)
    init = InitSpec.random(part, 3)
    nT = blocks[0].z_len
    w = rng.standard_normal(part.n_agents * nT)
    states = init_state(views, part, g, replace(init, w0=w))
    U_hat, Y_hat = assemble_global(blocks)
    S = np.kron(laplacian_sqrt(g), np.eye(nT))
    ref = U_hat @ np.concatenate(init.x0) - Y_hat - S @ w
    assert np.abs(stack(states) - ref).max() < 1e-10


def test_baseline_zero_z_is_fixed_point(rng):
    ds, part, A, views, g, blocks = setup(rng)
    states = [replace(s, z=np.zeros_like(s.z)) for s in init_state(views, part, g, InitSpec.random(part))]
    out = baseline_step(states, g, blocks, 1e-2)
    for a, b in zip(states, out):
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(b.z, 0)


def test_baseline_single_agent_solves_normal_equations(rng):
    ds, part, A, views, g, blocks = setup(rng, n_agents=1, exact=False)
    states = init_state(views, part, g, InitSpec.zeros(part))
    alpha = 1.0 / np.linalg.eigvalsh(blocks[0].U_lift.T @ blocks[0].U_lift).max()
    for _ in range(3000):
        states = baseline_step(states, g, blocks, alpha)
    A_hat = x_blocks_to_matrix([s.x for s in states], part)
    np.testing.assert_allclose(A_hat, least_squares(ds).A_star, atol=1e-9)


def test_baseline_preserves_symmetry(rng):
    U = rng.standard_normal((2, 4))
    ds = IoDataset(np.vstack([U, U]), rng.standard_normal((2, 4)))
    part = Partition(4, 2, ((0, 1), (2, 3)), ((0,), (1,)))
    views = split_views(ds, part)
    blocks = lift_all(views, part)
    g = preset("path", 2)
    z0 = rng.standard_normal(blocks[0].z_len)
    states = [replace(s, z=z0.copy()) for s in init_state(views, part, g, InitSpec.zeros(part))]
    for _ in range(50):
        states = baseline_step(states, g, blocks, 1e-2)
        np.testing.assert_array_equal(states[0].z, states[1].z)


def frozen_states(rng):
    ds, part, A, views, g, blocks = setup(rng)
    return g, blocks, init_state(views, part, g, InitSpec.random(part, 1))


def test_adam_zero_gradient_never_moves(rng):
    g, blocks, states = frozen_states(rng)
    states = [replace(s, z=np.zeros_like(s.z)) for s in states]
    x0 = stack(states, "x")
    for _ in range(20):
        states = adam_step(states, g, blocks, AdamConfig())
    assert not stack(states, "s1").any() and not stack(states, "s2").any()
    np.testing.assert_array_equal(stack(states, "x"), x0)


def test_adam_first_step(rng):
    g, blocks, states = frozen_states(rng)
    cfg = AdamConfig(alpha=0.01)
    out = adam_step(states, g, blocks, cfg)
    for s, o, b in zip(states, out, blocks):
        grad = b.adjoint(s.z)
        np.testing.assert_allclose(o.x, s.x - cfg.alpha * grad / (np.abs(grad) + cfg.epsilon), rtol=1e-12)
        assert o.k == 1


def test_adam_frozen_gradient_limit(rng):
    g, blocks, states = frozen_states(rng)
    cfg = AdamConfig(alpha=0.01, beta1=0.9, beta2=0.999)
    z0 = [s.z for s in states]
    for _ in range(1000):
        prev = states
        states = [replace(s, z=z) for s, z in zip(adam_step(states, g, blocks, cfg), z0)]
    for p, s, b in zip(prev, states, blocks):
        grad = b.adjoint(p.z)
        np.testing.assert_allclose(s.x - p.x, -cfg.alpha * grad / (np.abs(grad) + cfg.epsilon), rtol=1e-6)


def test_adam_second_moment_nonnegative(rng):
    g, blocks, states = frozen_states(rng)
    for _ in range(50):
        states = adam_step(states, g, blocks, AdamConfig())
        assert (stack(states, "s2") >= 0).all()


def test_bias_correction_guard(rng):
    g, blocks, states = frozen_states(rng)
    states = [replace(s, k=10**6) for s in states]
    out = adam_step(states, g, blocks, AdamConfig())
    assert np.isfinite(stack(out, "x")).all()


def test_displacement_bound(rng):
    # sum_k ||x(k) - x(k-1)|| <= alpha / (eps (1 - beta1)) * sum_k ||g(k)||
    g, blocks, states = frozen_states(rng)
    cfg = AdamConfig(alpha=1e-3, epsilon=1e-8)
    moved = grad_sum = 0.0
    for _ in range(300):
        grad_sum += np.linalg.norm(np.concatenate([b.adjoint(s.z) for s, b in zip(states, blocks)]))
        new = adam_step(states, g, blocks, cfg)
        moved += np.linalg.norm(stack(new, "x") - stack(states, "x"))
        assert moved <= cfg.alpha / (cfg.epsilon * (1 - cfg.beta1)) * grad_sum
        states = new


@pytest.mark.parametrize("lam, alpha, mu, expect", [(1.0, 1e-3, 1e-7, True), (1.0, 3.0, 1.0, False),
                                                    (0.0, 1.0, 1.0, True)])
def test_certificate_scalar(lam, alpha, mu, expect):
    assert step_size_certificate(lam, alpha, mu) is expect


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_certificate_matches_matrix_inequality(seed):
    rng = np.random.default_rng(seed)
    ds, part, A, views, g, blocks = setup(rng, n_agents=int(rng.integers(1, 4)), T=1, exact=False)
    D = dense_D(g, blocks)
    lam = np.linalg.eigvalsh(D).max()
    alpha = 2.0 / lam * rng.uniform(0.2, 1.3)
    mu = rng.uniform(0.01, 0.5) * alpha
    M = (alpha ** 2 + mu) * D.T @ D - alpha * (D.T + D)
    assert step_size_certificate(lam, alpha, mu) == (np.linalg.eigvalsh(M).max() <= 1e-9 * max(1, lam ** 2))


def test_kkt_examples(rng):
    ds, part, A, views, g, blocks = setup(rng)
    states = init_state(views, part, g, InitSpec.random(part))
    zero = [replace(s, z=np.zeros_like(s.z)) for s in states]
    assert kkt_residual(zero, g, blocks) == (0.0, 0.0)
    common = rng.standard_normal(blocks[0].z_len)
    same = [replace(s, z=common) for s in states]
    r_stat, r_cons = kkt_residual(same, g, blocks)
    assert r_cons == 0.0 and r_stat > 0


@pytest.mark.parametrize("seed", range(5))
def test_kkt_at_optimum(seed):
    rng = np.random.default_rng(seed)
    ds, part, A, views, g, blocks = setup(rng, exact=False)
    ref = least_squares(ds, part)
    # z* = 1 kron zbar with N zbar = sum_i (U_lift,i x_i* - Y_lift,i) = vec(A* U - Y)
    zbar = vec(ref.A_star @ ds.U - ds.Y) / part.n_agents
    states = init_state(views, part, g, InitSpec(tuple(ref.x_blocks())))
    states = [replace(s, z=zbar) for s in states]
    r_stat, r_cons = kkt_residual(states, g, blocks)
    assert r_stat < 1e-8 and r_cons < 1e-8


def test_lyapunov_squared_decrease(rng):
    ds, part, A, views, g, blocks = setup(rng)
    D = dense_D(g, blocks)
    mu = 1e-7
    cfg = AdamConfig(alpha=1e-2)
    assert step_size_certificate(np.linalg.eigvalsh(D).max(), cfg.alpha, mu)
    states = init_state(views, part, g, InitSpec.random(part))
    z_first = stack(states)
    total = 0.0
    for _ in range(200):
        z = stack(states)
        states = adam_step(states, g, blocks, cfg)
        z_new = stack(states)
        dz = D @ z
        assert np.linalg.norm(z_new) <= np.linalg.norm(z)
        assert z_new @ z_new - z @ z <= -mu * (dz @ dz) + 1e-12 * (z @ z)
        total += dz @ dz
    assert z_new @ z_new - z_first @ z_first <= -mu * total + 1e-10


@pytest.mark.parametrize("seed", range(3))
def test_gradient_finite_differences(seed):
    rng = np.random.default_rng(seed)
    ds, part, A, views, g, blocks = setup(rng, exact=False)
    nT = blocks[0].z_len
    U_hat, Y_hat = assemble_global(blocks)
    S = np.kron(laplacian_sqrt(g), np.eye(nT))
    w = rng.standard_normal(part.n_agents * nT)
    init = replace(InitSpec.random(part, seed), w0=w)
    states = init_state(views, part, g, init, blocks)

    def f(x):
        r = U_hat @ x - Y_hat - S @ w
        return 0.5 * r @ r

    x = np.concatenate(init.x0)
    grad = np.concatenate([b.adjoint(s.z) for s, b in zip(states, blocks)])
    h = 1e-6
    fd = np.array([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(x.size)])
    assert np.linalg.norm(fd - grad) / np.linalg.norm(grad) < 1e-5


def test_run_zero_iterations(rng):
    ds, part, A, views, g, blocks = setup(rng)
    tr = run(views, part, g, AdamConfig(iters=0), "adam", reference_A=A)
    assert [r.k for r in tr.records] == [0]
    assert tr.z_norms.shape == (1,)


def test_run_modes_share_z_trace(rng):
    ds, part, A, views, g, blocks = setup(rng)
    cfg = AdamConfig(iters=300)
    a = run(views, part, g, cfg, "baseline", reference_A=A, seed=5)
    b = run(views, part, g, cfg, "adam", reference_A=A, seed=5)
    assert a.z_digest == b.z_digest
    np.testing.assert_array_equal(a.z_norms, b.z_norms)
    assert not np.array_equal(stack(a.states, "x"), stack(b.states, "x"))
    c = run(views, part, g, cfg, "adam_tracking", reference_A=A, seed=5)
    assert c.z_digest != a.z_digest


def test_run_is_deterministic(rng):
    ds, part, A, views, g, blocks = setup(rng)
    cfg = AdamConfig(iters=100)
    a = run(views, part, g, cfg, "adam", reference_A=A, seed=2)
    b = run(views, part, g, cfg, "adam", reference_A=A, seed=2)
    assert a.z_digest == b.z_digest
    np.testing.assert_array_equal(stack(a.states, "x"), stack(b.states, "x"))


def test_run_records(rng):
    ds, part, A, views, g, blocks = setup(rng)
    tr = run(views, part, g, AdamConfig(iters=25), "baseline", reference_A=A, record_every=10)
    assert [r.k for r in tr.records] == [0, 10, 20, 25]
    assert len(tr.log) == 25 * 2 * len(g.edges)
    assert tr.certified


def test_baseline_error_decreases(rng):
    ds, part, A, views, g, blocks = setup(rng)
    tr = run(views, part, g, AdamConfig(alpha=1e-2, iters=20000), "baseline", reference_A=A, record_every=5000)
    errs = [r.err_max for r in tr.records]
    assert all(b < a for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-3


def test_adam_tracking_converges(rng):
    ds, part, A, views, g, blocks = setup(rng)
    tr = run(views, part, g, AdamConfig(alpha=1e-2, iters=20000), "adam_tracking", reference_A=A,
             record_every=20000)
    assert tr.final.err_max < 1e-3


def test_divergence_and_certificate_warning(rng):
    ds, part, A, views, g, blocks = setup(rng)
    with pytest.warns(CertificateWarning):
        with pytest.raises(DivergenceError) as exc:
            run(views, part, g, AdamConfig(alpha=5.0, iters=1000), "baseline")
    assert exc.value.k > 0


def test_unknown_mode(rng):
    ds, part, A, views, g, blocks = setup(rng)
    with pytest.raises(ValueError, match="mode"):
        run(views, part, g, AdamConfig(iters=1), "sgd")


def test_fingerprint_sees_single_bit():
    z = np.linspace(-1, 1, 12)
    a, b = ZFingerprint(12), ZFingerprint(12)
    a.update(z)
    flipped = z.copy()
    flipped.view(np.uint64)[7] ^= np.uint64(1)
    b.update(flipped)
    assert a.hexdigest() != b.hexdigest()
