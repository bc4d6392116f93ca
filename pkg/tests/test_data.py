import gzip

import numpy as np
import pytest

from gridgraph.data import (Dataset, FormatError, Rng, decode_idx_images, decode_idx_labels,
                            encode_idx_images, encode_idx_labels, find_mnist, load_mnist, load_ppm_dir,
                            parse_idx, read_pgm, read_ppm, split, threads_from_env, to_bytes, write_pgm)

MASK = (1 << 64) - 1


def splitmix64(state, count):
    out = []
    for _ in range(count):
        state = (state + 0x9E3779B97F4A7C15) & MASK
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        out.append(z ^ (z >> 31))
    return out


def test_rng_matches_scalar_recurrence():
    rng = Rng(42)
    want = splitmix64(42, 10)
    assert [rng.next_u64() for _ in range(3)] + [int(v) for v in rng._block(7)] == want


def test_rng_known_first_output():
    # published first output of SplitMix64 seeded with 0
    assert Rng(0).next_u64() == 0xE220A8397B1DCDAF


def test_rng_ranges_and_determinism():
    a = Rng(7).integers(3, 9, size=5000)
    assert a.min() == 3 and a.max() == 8
    assert np.array_equal(a, Rng(7).integers(3, 9, size=5000))
    u = Rng(8).random(1000)
    assert 0.0 <= u.min() and u.max() < 1.0
    with pytest.raises(ValueError):
        Rng(0).integers(2, 2)


def test_permutation_and_spawn():
    p = Rng(3).permutation(50)
    assert sorted(p.tolist()) == list(range(50))
    parent = Rng(3)
    c1, c2 = parent.spawn(1), parent.spawn(2)
    assert parent.state == Rng(3).state
    assert c1.next_u64() != c2.next_u64()


def test_idx_image_example():
    raw = bytes([0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 255, 128, 64])
    pix = decode_idx_images(raw)
    assert pix.shape == (1, 2, 2)
    assert np.array_equal(pix[0] / 255.0, [[0.0, 1.0], [128 / 255, 64 / 255]])


def test_idx_labels_and_parse(tmp_path):
    labels = np.array([3, 1, 4, 1, 5])
    raw = encode_idx_labels(labels)
    assert raw[:4] == bytes([0, 0, 8, 1])
    assert np.array_equal(decode_idx_labels(raw), labels)
    pix = np.arange(5 * 3 * 2, dtype=np.uint8).reshape(5, 3, 2)
    (tmp_path / "img").write_bytes(encode_idx_images(pix))
    with gzip.open(tmp_path / "lab.gz", "wb") as fh:
        fh.write(raw)
    ds = parse_idx(tmp_path / "img", tmp_path / "lab.gz")
    assert ds.images.shape == (5, 3, 2, 1)
    assert np.array_equal(to_bytes(ds.images[..., 0]), pix)
    assert np.array_equal(ds.labels, labels)


def test_idx_errors():
    with pytest.raises(FormatError):
        decode_idx_images(bytes([0, 0, 8, 1]) + bytes(12))
    with pytest.raises(FormatError):
        decode_idx_images(encode_idx_images(np.zeros((2, 2, 2), np.uint8))[:-1])
    with pytest.raises(FormatError):
        decode_idx_labels(bytes([0, 0, 8, 3, 0, 0, 0, 1]))


def test_mnist_file_discovery(tmp_path):
    (tmp_path / "t10k-images-idx3-ubyte.gz").write_bytes(gzip.compress(encode_idx_images(np.zeros((2, 28, 28), np.uint8))))
    (tmp_path / "t10k-labels-idx1-ubyte").write_bytes(encode_idx_labels([0, 9]))
    assert len(load_mnist(tmp_path, "test")) == 2
    with pytest.raises(FileNotFoundError):
        find_mnist(tmp_path, "train")


def write_ppm(path, pix):
    h, w, _ = pix.shape
    path.write_bytes(f"P6\n# comment\n{w} {h}\n255\n".encode() + pix.astype(np.uint8).tobytes())


def test_ppm_single_red_pixel(tmp_path):
    write_ppm(tmp_path / "a.ppm", np.array([[[255, 0, 0]]]))
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), [[[1.0, 0.0, 0.0]]])


def test_ppm_dir(tmp_path):
    assert len(load_ppm_dir(tmp_path)) == 0
    rng = Rng(0)
    for name in ("3_0001.ppm", "7_0002.ppm"):
        write_ppm(tmp_path / name, rng.integers(0, 256, size=(32, 32, 3)))
    ds = load_ppm_dir(tmp_path)
    assert ds.images.shape == (2, 32, 32, 3)
    assert ds.labels.tolist() == [3, 7]


def test_ppm_rejects_other_formats(tmp_path):
    (tmp_path / "x.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(FormatError):
        read_ppm(tmp_path / "x.ppm")


def test_pgm_round_trip_within_quantization(tmp_path):
    img = Rng(1).random((28, 28))
    write_pgm(tmp_path / "x.pgm", img)
    assert (tmp_path / "x.pgm").read_bytes().startswith(b"P5\n28 28\n255\n")
    back = read_pgm(tmp_path / "x.pgm")
    assert np.abs(back - img).max() <= 1 / 510 + 1e-12


def dataset(n):
    return Dataset(np.arange(n, dtype=np.float64).reshape(n, 1, 1, 1), np.arange(n) % 10)


def test_split_is_deterministic_and_disjoint():
    ds = dataset(60000)
    a1, b1 = split(ds, (10000, 2000), Rng(5))
    a2, b2 = split(ds, (10000, 2000), Rng(5))
    assert np.array_equal(a1.images, a2.images) and np.array_equal(b1.images, b2.images)
    assert len(a1) == 10000 and len(b1) == 2000
    assert not set(a1.images.ravel()) & set(b1.images.ravel())
    a3, _ = split(ds, (10000, 2000), Rng(6))
    assert not np.array_equal(a1.images, a3.images)
    with pytest.raises(ValueError):
        split(ds, (60000, 1), Rng(0))


def test_threads_from_env(monkeypatch):
    monkeypatch.delenv("GRIDGRAPH_THREADS", raising=False)
    assert threads_from_env() == 1
    monkeypatch.setenv("GRIDGRAPH_THREADS", "4")
    assert threads_from_env() == 4
