import hashlib
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from latticeseg import data
from latticeseg.data import PointCloud, format_cloud, parse_cloud
from latticeseg.errors import ConfigError, ParseError, SchemaError

reals = st.floats(allow_nan=False, allow_infinity=False, width=64)


def test_minimal_file():
    c = parse_cloud("3 0 1 0\n0 0 0 2\n")
    assert len(c) == 1 and c.semantic.tolist() == [2] and c.instance is None


def test_empty_body():
    c = parse_cloud("2 1 0 1\n")
    assert len(c) == 0 and c.positions.shape == (0, 2) and c.features.shape == (0, 1)


def test_comments_and_blank_lines():
    c = parse_cloud("# header follows\n\n1 0 0 1\n# point\n0.5 -1\n")
    assert c.positions.tolist() == [[0.5]] and c.instance.tolist() == [-1]


@pytest.mark.parametrize("text,exc,line", [
    ("3 0 1\n", ParseError, 1),
    ("3 0 1 0\n0 0 0 1\n0 0 x 1\n", ParseError, 3),
    ("3 0 1 0\n0 0 0 1.5\n", ParseError, 2),
    ("3 0 1 0\n0 0 0\n", SchemaError, 2),
    ("3 0 1 0\n0 0 0 -2\n", SchemaError, 2),
    ("0 0 0 0\n", SchemaError, 1),
])
def test_errors_carry_line_numbers(text, exc, line):
    with pytest.raises(exc) as err:
        parse_cloud(text)
    assert err.value.line == line
    assert f"line {line}" in str(err.value)


def test_missing_header():
    with pytest.raises(ParseError):
        parse_cloud("# nothing\n")


@given(st.integers(1, 4).flatmap(lambda d: st.tuples(
    st.just(d),
    arrays(np.float64, st.tuples(st.integers(0, 12), st.just(d)), elements=reals),
    st.integers(0, 3), st.booleans(), st.booleans(), st.integers(0, 2**32 - 1))))
@settings(max_examples=60, deadline=None)
def test_save_load_round_trip_is_bit_exact(args):
    d, pos, fd, has_sem, has_inst, seed = args
    r = np.random.default_rng(seed)
    m = len(pos)
    c = PointCloud(pos, r.normal(size=(m, fd)) * 10.0 ** r.integers(-300, 300, size=(m, fd)),
                   r.integers(-1, 5, m) if has_sem else None, r.integers(-1, 5, m) if has_inst else None)
    back = parse_cloud(format_cloud(c))
    assert back.positions.tobytes() == c.positions.tobytes()
    assert back.features.tobytes() == c.features.tobytes()
    for name in ("semantic", "instance"):
        a, b = getattr(c, name), getattr(back, name)
        assert (a is None and b is None) or np.array_equal(a, b)


def test_files_and_labels(tmp_path, rng):
    c = PointCloud(rng.normal(size=(5, 3)), rng.normal(size=(5, 2)), [0, 1, 2, -1, 0])
    data.save_cloud(tmp_path / "c.txt", c)
    back = data.load_cloud(tmp_path / "c.txt")
    np.testing.assert_array_equal(back.positions, c.positions)
    data.save_labels(tmp_path / "l.txt", [3, -1, 0])
    assert data.load_labels(tmp_path / "l.txt").tolist() == [3, -1, 0]
    (tmp_path / "bad.txt").write_text("1\nx\n")
    with pytest.raises(ParseError, match="line 2"):
        data.load_labels(tmp_path / "bad.txt")


def test_manifest(tmp_path, rng):
    paths = []
    for t in range(3):
        p = tmp_path / f"t{t}.txt"
        data.save_cloud(p, PointCloud(rng.normal(size=(4, 2)), None, [t] * 4))
        paths.append(p)
    data.save_manifest(tmp_path / "s.manifest", paths)
    seq = data.load_sequence(tmp_path / "s.manifest")
    assert [s.semantic[0] for s in seq] == [0, 1, 2]
    data.save_cloud(tmp_path / "odd.txt", PointCloud(rng.normal(size=(4, 3)), None))
    data.save_manifest(tmp_path / "bad.manifest", [paths[0], tmp_path / "odd.txt"])
    with pytest.raises(SchemaError):
        data.load_sequence(tmp_path / "bad.manifest")
    (tmp_path / "empty.manifest").write_text("frame = common\n")
    with pytest.raises(SchemaError):
        data.load_sequence(tmp_path / "empty.manifest")


class TestSynthetic:
    def test_region_predicate_recovers_labels(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            c, offset = data.semantic_parts(rng, 3000)
            np.testing.assert_array_equal(data.region_labels(c.positions, offset), c.semantic)
            np.testing.assert_array_equal(c.features, c.positions)
            assert np.bincount(c.semantic).tolist() == [1000, 1000, 1000]

    def test_instances(self):
        (c,) = data.synthesize("instances", 4, points=2001)
        assert len(c) == 2001 and sorted(set(c.instance)) == [0, 1, 2, 3]
        centres = np.array([c.positions[c.instance == i].mean(0) for i in range(4)])
        gaps = np.linalg.norm(centres[:, None] - centres[None], axis=2) + np.eye(4) * 99
        assert gaps.min() > 1.2

    def test_motion_velocity(self):
        for v in (0.0, 0.25, 0.4):
            rng = np.random.default_rng(2)
            seq, direction = data.motion_sequence(rng, steps=4, velocity=v)
            means = np.array([c.positions[c.semantic == 2].mean(0) for c in seq])
            np.testing.assert_allclose(np.diff(means, axis=0), np.tile(direction * v, (3, 1)), atol=1e-12)
            static = np.array([c.positions[c.semantic == 1].mean(0) for c in seq])
            np.testing.assert_allclose(np.diff(static, axis=0), 0, atol=1e-12)
            assert all(c.features.shape == (1000, 0) for c in seq)

    def test_generation_is_deterministic(self, tmp_path):
        digests = []
        for run in ("a", "b"):
            out = tmp_path / run
            data.gen_synthetic("motion", 5, out, count=2)
            h = hashlib.sha256()
            for name in sorted(os.listdir(out)):
                h.update(name.encode() + (out / name).read_bytes())
            digests.append(h.hexdigest())
        assert digests[0] == digests[1]
        task, items = data.load_dataset(tmp_path / "a")
        assert task == "motion" and len(items) == 2 and len(items[0]) == 3

    def test_invalid_sizes(self):
        with pytest.raises(ConfigError):
            data.synthesize("semantic-parts", 0, count=0)
        with pytest.raises(ConfigError):
            data.synthesize("instances", 0, points=3)
        with pytest.raises(ConfigError):
            data.synthesize("weather", 0)
