import numpy as np
import pytest

from distid.datamodel import IoDataset, unvec, vec
from distid.oracle import generate_smallscale, least_squares, model_error


def test_identity_data(rng):
    Y = rng.standard_normal((3, 4))
    np.testing.assert_allclose(least_squares(IoDataset(np.eye(4), Y)).A_star, Y, atol=1e-14)


def test_square_invertible(rng):
    U = rng.standard_normal((5, 5))
    Y = rng.standard_normal((2, 5))
    ref = least_squares(IoDataset(U, Y))
    assert ref.unique
    np.testing.assert_allclose(ref.A_star, Y @ np.linalg.inv(U), atol=1e-10)


def test_overdetermined_recovers_truth(rng):
    A = rng.standard_normal((3, 6))
    U = rng.standard_normal((6, 12))
    np.testing.assert_allclose(least_squares(IoDataset(U, A @ U)).A_star, A, atol=1e-10)


def test_rank_deficient_minimum_norm(rng):
    U = rng.standard_normal((2, 6))
    U = np.vstack([U, U[0]])            # third row duplicates the first
    Y = rng.standard_normal((2, 6))
    ref = least_squares(IoDataset(U, Y))
    assert not ref.unique
    np.testing.assert_allclose(ref.A_star, Y @ np.linalg.pinv(U), atol=1e-10)


def test_ill_conditioned_uses_pinv(rng):
    U = rng.standard_normal((3, 8))
    U[2] = U[1] + 1e-9 * rng.standard_normal(8)
    Y = rng.standard_normal((1, 8))
    ref = least_squares(IoDataset(U, Y))
    np.testing.assert_allclose(ref.A_star, Y @ np.linalg.pinv(U), rtol=1e-6)


def test_local_optimality(rng):
    U = rng.standard_normal((4, 9))
    Y = rng.standard_normal((3, 9))
    A = least_squares(IoDataset(U, Y)).A_star
    best = np.linalg.norm(A @ U - Y)
    for _ in range(100):
        assert best <= np.linalg.norm((A + 1e-3 * rng.standard_normal(A.shape)) @ U - Y)


@pytest.mark.parametrize("seed", range(6))
def test_generator_shapes(seed):
    ds, part, ref = generate_smallscale(seed)
    assert part.n_agents == 5
    assert all(len(d) in (4, 5) for d in part.input_rows)
    assert all(len(d) in (3, 4) for d in part.output_rows)
    assert 20 <= part.m <= 25 and 15 <= part.n <= 20
    assert ds.T == 2 * part.m
    assert np.linalg.matrix_rank(ds.U) == part.m
    np.testing.assert_array_equal(ds.Y, ref.A_star @ ds.U)


def test_generator_deterministic():
    a, b = generate_smallscale(11), generate_smallscale(11)
    np.testing.assert_array_equal(a[0].U, b[0].U)
    np.testing.assert_array_equal(a[2].A_star, b[2].A_star)
    assert a[1] == b[1]
    assert not np.array_equal(generate_smallscale(12)[0].U[:3, :3], a[0].U[:3, :3])


def test_generator_noise_hook():
    ds, part, ref = generate_smallscale(0, noise=0.1)
    assert 0 < np.abs(ds.Y - ref.A_star @ ds.U).max() < 1.0


def test_model_error():
    ds, part, ref = generate_smallscale(1)
    assert model_error(ref.x_blocks(), ref)[0] == 0.0
    A = ref.A_star.copy()
    A[2, 3] += 0.5
    x = [vec(A[:, list(d)]) for d in part.input_rows]
    err, E = model_error(x, ref)
    assert err == pytest.approx(0.5)
    assert np.count_nonzero(E) == 1 and E[2, 3] == pytest.approx(0.5)


def test_model_error_dimension_checks():
    ds, part, ref = generate_smallscale(1)
    with pytest.raises(ValueError):
        model_error(ref.x_blocks()[:-1], ref)
    with pytest.raises(ValueError):
        model_error([np.zeros(3)] + ref.x_blocks()[1:], ref)


def test_blocks_reconstruct_A():
    ds, part, ref = generate_smallscale(4)
    order = np.concatenate([list(d) for d in part.input_rows])
    np.testing.assert_array_equal(np.hstack(ref.blocks()), ref.A_star[:, order])


def test_vec_round_trip(rng):
    for shape in [(1, 1), (3, 5), (4, 2)]:
        M = rng.standard_normal(shape)
        np.testing.assert_array_equal(unvec(vec(M), shape[0]), M)
