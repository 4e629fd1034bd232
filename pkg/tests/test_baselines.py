import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcbmerge.baselines import (
    DareConfig,
    TiesConfig,
    average_merge,
    dare_preprocess,
    keyed_uniform,
    task_arithmetic_merge,
    ties_merge,
    trim,
)
from pcbmerge.checkpoint_io import Checkpoint
from pcbmerge.errors import ConfigError
from pcbmerge.task_vector import compute_task_vector

import oracles
from conftest import make_family


def ck(**arrays):
    return Checkpoint.from_arrays({k: np.asarray(v, dtype=np.float32) for k, v in arrays.items()})


def tvs_from(pre, *deltas):
    p = ck(w=pre)
    return p, [compute_task_vector(ck(w=np.add(pre, d)), p) for d in deltas]


@pytest.mark.parametrize(
    "values, expected",
    [([[2, 4], [4, 8]], [3, 6]), ([[1.5, -2]], [1.5, -2]), ([[0], [3], [6]], [3])],
)
def test_average(values, expected):
    out = average_merge([ck(w=v) for v in values])
    np.testing.assert_array_equal(out["w"].to_numpy(), expected)


def test_average_non_mergeable_from_first():
    a = Checkpoint.from_arrays({"w": np.zeros(2, np.float32), "ids": np.array([1, 2])})
    b = Checkpoint.from_arrays({"w": np.ones(2, np.float32), "ids": np.array([7, 8])})
    np.testing.assert_array_equal(average_merge([a, b])["ids"].to_numpy(), [1, 2])


def test_task_arithmetic():
    pre, tvs = tvs_from([1, 1], [1, 0], [0, 2])
    np.testing.assert_array_equal(task_arithmetic_merge(pre, tvs, 0.5)["w"].to_numpy(), [1.5, 2])
    assert task_arithmetic_merge(pre, tvs, 0.0).equals(pre)


def test_task_arithmetic_single_is_finetuned(rng):
    pre, (ft,) = make_family(rng, 1)
    assert task_arithmetic_merge(pre, [compute_task_vector(ft, pre)], 1.0).equals(ft)


def test_average_equals_task_arithmetic(rng):
    pre, fts = make_family(rng, 4)
    tvs = [compute_task_vector(f, pre) for f in fts]
    a = average_merge(fts)
    b = task_arithmetic_merge(pre, tvs, 1 / 4)
    for k in a.names():
        np.testing.assert_allclose(a[k].to_numpy(), b[k].to_numpy(), atol=1e-6)


def test_ties_examples():
    pre, tvs = tvs_from([0, 0], [2, -3], [4, 5])
    np.testing.assert_array_equal(ties_merge(pre, tvs, TiesConfig(1.0))["w"].to_numpy(), [3, 5])
    np.testing.assert_array_equal(trim(np.array([0.1, -5, 2, 0.3], np.float32), 0.5), [0, -5, 2, 0])
    pre, tvs = tvs_from([0], [-3], [3])
    np.testing.assert_array_equal(ties_merge(pre, tvs, TiesConfig(1.0))["w"].to_numpy(), [3])


def test_ties_single_task_identity(rng):
    pre, (ft,) = make_family(rng, 1)
    assert ties_merge(pre, [compute_task_vector(ft, pre)], TiesConfig(1.0)).equals(ft)


def test_ties_config_validation():
    with pytest.raises(ConfigError):
        TiesConfig(0.0).validate()
    with pytest.raises(ConfigError):
        DareConfig(1.0).validate()


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 3), st.integers(1, 16), st.floats(0.05, 1.0), st.integers(0, 2**31))
def test_ties_matches_oracle(n, D, k, seed):
    rng = np.random.default_rng(seed)
    deltas = rng.standard_normal((n, D)).astype(np.float32)
    deltas[rng.random((n, D)) < 0.2] = 0
    pre, tvs = tvs_from(np.zeros(D), *deltas)
    got = ties_merge(pre, tvs, TiesConfig(k))["w"].to_numpy()
    want = oracles.ties_tau_m(deltas.astype(float).tolist(), k)
    np.testing.assert_allclose(got, want, atol=1e-6, rtol=0)


def test_dare_identity_and_support():
    _, (tv,) = tvs_from([0, 0], [2, -4])
    assert dare_preprocess(tv, DareConfig(0.0, 3)) is tv
    seen = set()
    for seed in range(200):
        out = dare_preprocess(tv, DareConfig(0.5, seed)).deltas["w"]
        seen.add(tuple(out.tolist()))
    assert seen == {(0.0, 0.0), (4.0, 0.0), (0.0, -8.0), (4.0, -8.0)}


def test_dare_deterministic_and_name_keyed():
    u = keyed_uniform(5, "a.weight", 100)
    np.testing.assert_array_equal(u, keyed_uniform(5, "a.weight", 100))
    np.testing.assert_array_equal(u[:40], keyed_uniform(5, "a.weight", 40))
    assert not np.array_equal(u, keyed_uniform(6, "a.weight", 100))
    assert not np.array_equal(u, keyed_uniform(5, "b.weight", 100))
    assert ((u >= 0) & (u < 1)).all()


def test_dare_order_independent():
    a = {"x": np.arange(1, 9, dtype=np.float32), "y": np.ones(5, np.float32)}
    z = {k: np.zeros_like(v) for k, v in a.items()}
    t1 = compute_task_vector(Checkpoint.from_arrays(a), Checkpoint.from_arrays(z))
    rev = dict(reversed(list(a.items())))
    t2 = compute_task_vector(Checkpoint.from_arrays(rev), Checkpoint.from_arrays(dict(reversed(list(z.items())))))
    d1, d2 = dare_preprocess(t1, DareConfig(0.5, 9)), dare_preprocess(t2, DareConfig(0.5, 9))
    for k in a:
        np.testing.assert_array_equal(d1.deltas[k], d2.deltas[k])


def test_dare_uniforms_look_uniform():
    u = keyed_uniform(0, "w", 200_000)
    hist, _ = np.histogram(u, bins=20, range=(0, 1))
    expected = len(u) / 20
    chi2 = float(((hist - expected) ** 2 / expected).sum())
    assert chi2 < 45  # 19 dof, p ~ 0.001
