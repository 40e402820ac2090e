import gzip
import struct
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgselect.environment import (
    CsvFormatError,
    DataError,
    Domain,
    Environment,
    IdxFormatError,
    SynthSpec,
    environment_records,
    equalize_m,
    load_feature_csv,
    load_idx,
    rotate_domain,
    rotate_images,
    rotated_mnist,
    sample_fresh_domains,
    split_environment,
    synth_anchors,
    synth_class_means,
    synth_environment,
    write_idx,
)
from dgselect.harness import emit_csv


def _multiset(domains):
    return Counter((int(i), tuple(x), int(c)) for dom in domains for x, c, i in zip(dom.X, dom.y, dom.ids))


# --- synthetic generator ----------------------------------------------------


def test_synth_is_deterministic():
    spec = SynthSpec(n_domains=3, m_per_domain=40, d=5, seed=7)
    assert synth_environment(spec) == synth_environment(spec)
    assert synth_environment(spec) != synth_environment(SynthSpec(n_domains=3, m_per_domain=40, d=5, seed=8))


def test_synth_shapes_and_balance():
    env = synth_environment(SynthSpec(n_domains=3, m_per_domain=30, d=4, K=3))
    assert env.n == 3 and env.feature_dim == 4 and env.num_classes == 3
    for dom in env:
        assert dom.m == 30
        assert sorted(Counter(dom.y.tolist()).values()) == [10, 10, 10]


@pytest.mark.parametrize(
    "kwargs",
    [dict(m_per_domain=3, K=2), dict(label_noise=0.5), dict(covariate_shift_scale=-1.0), dict(n_domains=0)],
)
def test_synth_rejects_invalid_spec(kwargs):
    with pytest.raises(DataError):
        synth_environment(SynthSpec(**kwargs))


def test_zero_shift_domains_agree_for_fixed_classifier():
    m = 10_000
    env = synth_environment(SynthSpec(n_domains=4, m_per_domain=m, d=5, covariate_shift_scale=0.0, seed=3))
    w = np.random.default_rng(0).standard_normal(5)
    risks = [np.mean((dom.X @ w > 0).astype(int) != dom.y) for dom in env]
    assert max(risks) - min(risks) < 3 * np.sqrt(1 / m)


def test_offset_norms_match_shift_scale():
    spec = SynthSpec(n_domains=4, d=2, K=2, covariate_shift_scale=3.0, seed=1)
    means = synth_class_means(spec)
    offsets = means - synth_anchors(spec)[None]
    np.testing.assert_allclose(np.linalg.norm(offsets, axis=2), 3.0, rtol=1e-12)


def test_inter_domain_mean_distance_matches_monte_carlo():
    # Oracle: distance between two independent uniformly-oriented offsets of norm s in 2-D,
    # estimated from 1e5 direct draws, versus the generator's own offsets across many seeds.
    s = 3.0
    rng = np.random.default_rng(123)
    ang = rng.uniform(0, 2 * np.pi, size=(100_000, 2))
    a = s * np.stack([np.cos(ang[:, 0]), np.sin(ang[:, 0])], 1)
    b = s * np.stack([np.cos(ang[:, 1]), np.sin(ang[:, 1])], 1)
    oracle = np.linalg.norm(a - b, axis=1).mean()
    assert abs(oracle - 4 * s / np.pi) < 0.02  # E|2 s sin(theta/2)|
    gen = []
    for seed in range(2500):
        means = synth_class_means(SynthSpec(n_domains=4, d=2, K=2, covariate_shift_scale=s, seed=seed))
        for c in range(2):
            for j in range(4):
                for k in range(j + 1, 4):
                    gen.append(np.linalg.norm(means[j, c] - means[k, c]))
    assert abs(np.mean(gen) - oracle) < 0.05
    # root-mean-square distance is s * sqrt(2)
    assert abs(np.sqrt(np.mean(np.square(gen))) - s * np.sqrt(2)) < 0.05


def test_label_noise_rate():
    env = synth_environment(SynthSpec(n_domains=1, m_per_domain=20_000, d=3, label_noise=0.2, class_sep=0.0,
                                      covariate_shift_scale=0.0, seed=5))
    clean = np.arange(20_000) % 2  # before the shuffle; compare class frequencies instead
    assert abs(np.mean(env[0].y) - np.mean(clean)) < 0.02


def test_fresh_domains_share_anchors():
    spec = SynthSpec(n_domains=3, m_per_domain=20, d=4, seed=2)
    fresh = sample_fresh_domains(spec, 2, 50, seed=9)
    assert fresh.n == 2 and fresh[0].m == 50 and fresh.feature_dim == 4
    assert sample_fresh_domains(spec, 2, 50, seed=9) == fresh


# --- data model ---------------------------------------------------------------


def test_domain_rejects_bad_input():
    with pytest.raises(DataError):
        Domain("a", np.zeros((0, 3)), np.zeros(0))
    with pytest.raises(DataError):
        Domain("a", np.array([[np.nan]]), np.array([0]))
    with pytest.raises(DataError):
        Environment.from_domains([Domain("a", np.zeros((2, 3)), [0, 1]), Domain("b", np.zeros((2, 4)), [0, 1])])


def test_domain_is_immutable():
    dom = Domain("a", np.zeros((2, 2)), [0, 1])
    with pytest.raises(ValueError):
        dom.X[0, 0] = 1.0


# --- CSV ------------------------------------------------------------------------


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_csv_single_domain(tmp_path):
    env = load_feature_csv(_write(tmp_path / "a.csv", "domain,label,f0,f1\nx,0,1.5,2\nx,1,-3,4e-1\n"))
    assert env.n == 1 and env[0].m == 2 and env.feature_dim == 2
    np.testing.assert_array_equal(env[0].X, [[1.5, 2.0], [-3.0, 0.4]])


def test_csv_three_domains_counts(tmp_path):
    rows = ["domain,label,f0"] + [f"{d},{i % 2},{i}" for i, d in enumerate("abcabca")]
    env = load_feature_csv(_write(tmp_path / "a.csv", "\n".join(rows) + "\n"))
    assert env.ids == ["a", "b", "c"]
    assert [dom.m for dom in env] == [3, 2, 2]
    np.testing.assert_array_equal(env["a"].X[:, 0], [0, 3, 6])


@pytest.mark.parametrize(
    "text, line",
    [
        ("domain,label,f0\na,0,1\na,1\n", 3),
        ("domain,label,f0\na,0,abc\n", 2),
        ("dom,label,f0\na,0,1\n", 1),
        ("domain,label,f0\na,zero,1\n", 2),
    ],
)
def test_csv_errors_carry_line_numbers(tmp_path, text, line):
    with pytest.raises(CsvFormatError) as err:
        load_feature_csv(_write(tmp_path / "bad.csv", text))
    assert err.value.line == line
    assert f"line {line}" in str(err.value)


def test_csv_round_trip_is_byte_identical(tmp_path):
    env = synth_environment(SynthSpec(n_domains=3, m_per_domain=8, d=3, seed=11))
    first = tmp_path / "first.csv"
    emit_csv(environment_records(env), first)  # canonical form
    again = tmp_path / "again.csv"
    emit_csv(environment_records(load_feature_csv(first)), again)
    assert first.read_bytes() == again.read_bytes()
    assert load_feature_csv(again) == load_feature_csv(first)
    np.testing.assert_array_equal(load_feature_csv(first)[1].X, env[1].X)


# --- IDX ------------------------------------------------------------------------


def test_idx_two_blank_images(tmp_path):
    imgs, labs = tmp_path / "i.idx", tmp_path / "l.idx"
    write_idx(imgs, labs, np.zeros((2, 28, 28)), [3, 7])
    dom = load_idx(imgs, labs)
    assert dom.m == 2 and dom.d == 784
    assert not dom.X.any()
    assert dom.y.tolist() == [3, 7]


def test_idx_wrong_magic(tmp_path):
    imgs, labs = tmp_path / "i.idx", tmp_path / "l.idx"
    write_idx(imgs, labs, np.zeros((2, 4, 4)), [0, 1])
    with pytest.raises(IdxFormatError, match="wrong magic"):
        load_idx(imgs, imgs)


def test_idx_count_mismatch_and_truncation(tmp_path):
    imgs, labs = tmp_path / "i.idx", tmp_path / "l.idx"
    write_idx(imgs, labs, np.zeros((3, 4, 4)), [0, 1])
    with pytest.raises(IdxFormatError, match="count mismatch"):
        load_idx(imgs, labs)
    write_idx(imgs, labs, np.zeros((3, 4, 4)), [0, 1, 2])
    imgs.write_bytes(imgs.read_bytes()[:-5])
    with pytest.raises(IdxFormatError, match="truncated"):
        load_idx(imgs, labs)


def test_idx_matches_byte_level_reader(tmp_path):
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, size=(5, 28, 28), dtype=np.uint8)
    imgs, labs = tmp_path / "i.gz", tmp_path / "l.idx"
    write_idx(tmp_path / "raw", labs, pixels, [1, 2, 3, 4, 5])
    imgs.write_bytes(gzip.compress((tmp_path / "raw").read_bytes()))
    dom = load_idx(imgs, labs)
    # oracle: walk the raw bytes of the first image by offset
    raw = (tmp_path / "raw").read_bytes()
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    assert (magic, count, rows, cols) == (0x803, 5, 28, 28)
    first_sum = sum(raw[16 + k] for k in range(rows * cols))
    assert dom.X[0].sum() * 255 == pytest.approx(first_sum, abs=1e-9)
    assert dom.X.max() <= 1.0 and dom.X.min() >= 0.0


# --- rotation -----------------------------------------------------------------


def _oracle_rotate(img, angle_deg):
    """Per-pixel inverse mapping with explicit bilinear weights."""
    n = img.shape[0]
    c = (n - 1) / 2
    t = np.deg2rad(angle_deg)
    out = np.zeros_like(img, dtype=float)

    def px(r, q):
        return img[r, q] if 0 <= r < n and 0 <= q < n else 0.0

    for r in range(n):
        for q in range(n):
            # visual counter-clockwise turn with rows pointing down
            sr = np.cos(t) * (r - c) + np.sin(t) * (q - c) + c
            sq = -np.sin(t) * (r - c) + np.cos(t) * (q - c) + c
            r0, q0 = int(np.floor(sr)), int(np.floor(sq))
            a, b = sr - r0, sq - q0
            out[r, q] = ((1 - a) * (1 - b) * px(r0, q0) + (1 - a) * b * px(r0, q0 + 1)
                         + a * (1 - b) * px(r0 + 1, q0) + a * b * px(r0 + 1, q0 + 1))
    return out


def test_rotation_zero_is_identity():
    dom = Domain("a", np.random.default_rng(0).random((3, 16)), [0, 1, 0])
    assert rotate_domain(dom, 0) == dom


def test_rotation_matches_inverse_map_oracle():
    img = np.zeros((28, 28))
    img[5, 20] = 1.0
    got = rotate_images(img[None], 15.0)[0]
    np.testing.assert_allclose(got, _oracle_rotate(img, 15.0), atol=1e-6)
    img = np.random.default_rng(1).random((9, 9))
    np.testing.assert_allclose(rotate_images(img[None], 37.0)[0], _oracle_rotate(img, 37.0), atol=1e-12)


def test_rotation_of_constant_image():
    img = np.full((1, 29, 29), 0.6)
    out = rotate_images(img, 30.0)[0]
    assert out[14, 14] == pytest.approx(0.6, abs=1e-12)
    np.testing.assert_allclose(out[10:19, 10:19], 0.6, atol=1e-12)
    assert out[0, 0] == 0.0 and out[-1, -1] == 0.0


def test_rotation_ninety_degrees_is_a_transpose_flip():
    img = np.random.default_rng(2).random((1, 7, 7))
    out = rotate_images(img, 90.0)[0]
    # counter-clockwise quarter turn: np.rot90
    np.testing.assert_allclose(out, np.rot90(img[0]), atol=1e-12)


def test_rotation_round_trip_on_smooth_image():
    r, c = np.meshgrid(np.arange(28), np.arange(28), indexing="ij")
    img = np.exp(-((r - 13.5) ** 2 + (c - 15) ** 2) / 60.0)
    back = rotate_images(rotate_images(img[None], 25.0), -25.0)[0]
    assert np.abs(back - img)[4:24, 4:24].max() < 2e-2


def test_rotate_non_square_raises():
    with pytest.raises(DataError):
        rotate_domain(Domain("a", np.zeros((1, 10)), [0]), 15)


def test_rotated_mnist_disjoint_chunks():
    base = Domain("m", np.random.default_rng(0).random((60, 16)), np.arange(60) % 3)
    env = rotated_mnist(base, [0, 15, 30], per_domain=20)
    assert env.ids == ["0", "15", "30"]
    ids = np.concatenate([d.ids for d in env])
    assert len(set(ids.tolist())) == 60


# --- splits -----------------------------------------------------------------------


def _small_env(sizes=(10,), K=2, seed=0):
    rng = np.random.default_rng(seed)
    doms, off = [], 0
    for j, m in enumerate(sizes):
        doms.append(Domain(f"d{j}", rng.standard_normal((m, 3)), np.arange(m) % K, np.arange(off, off + m)))
        off += m
    return Environment.from_domains(doms)


def test_split_half_balanced():
    tr, te = split_environment(_small_env((10,)), 0.5, seed=0)
    assert tr[0].m == 5 and te[0].m == 5
    assert set(tr[0].y.tolist()) == {0, 1} and set(te[0].y.tolist()) == {0, 1}


def test_split_deterministic_and_seed_sensitive():
    env = _small_env((20, 30))
    a = split_environment(env, 0.3, seed=4)
    assert a[0] == split_environment(env, 0.3, seed=4)[0]
    assert a[0] != split_environment(env, 0.3, seed=5)[0]


@settings(max_examples=30, deadline=None)
@given(sizes=st.lists(st.integers(4, 40), min_size=1, max_size=4), frac=st.floats(0.1, 0.9), seed=st.integers(0, 99))
def test_split_union_and_disjointness(sizes, frac, seed):
    env = _small_env(tuple(sizes), seed=seed)
    tr, te = split_environment(env, frac, seed)
    assert _multiset(tr) + _multiset(te) == _multiset(env)
    assert not set(_multiset(tr)) & set(_multiset(te))


def test_split_rejects_singleton_class():
    env = Environment.from_domains([Domain("a", np.zeros((3, 2)), [0, 0, 1])])
    with pytest.raises(DataError):
        split_environment(env, 0.5, 0)
    with pytest.raises(ValueError):
        split_environment(_small_env(), 1.0, 0)


def test_equalize_sizes():
    env = _small_env((10, 7, 9))
    eq = equalize_m(env, seed=1)
    assert [d.m for d in eq] == [7, 7, 7]
    assert eq[1] == env[1]


def test_equalize_noop_when_equal():
    env = _small_env((6, 6))
    assert equalize_m(env, 3) == env


@settings(max_examples=30, deadline=None)
@given(sizes=st.lists(st.integers(1, 30), min_size=1, max_size=5), seed=st.integers(0, 999))
def test_equalize_is_sub_multiset(sizes, seed):
    env = _small_env(tuple(sizes), K=1, seed=seed)
    eq = equalize_m(env, seed)
    assert len({d.m for d in eq}) == 1
    for a, b in zip(eq, env):
        assert not (_multiset([a]) - _multiset([b]))
