import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from lvit.autodiff import RngState
from lvit.data import (
    PHOENIX_END,
    Dataset,
    Sample,
    batches,
    bilinear_resize,
    decode_image,
    gen_synthetic,
    load_image_dir,
    parse_phoenix,
    preprocess,
    read_pgm,
    synthetic_label_names,
    synthetic_template,
    write_pgm,
    write_synthetic_tree,
)
from lvit.errors import ContractError, FormatError, IngestError, TruncationError

from helpers import write_phoenix


def make_tree(root, classes=10, per_class=3, size=(60, 52), seed=0):
    rng = np.random.default_rng(seed)
    for c in range(classes):
        d = root / f"class_{c:02d}"
        d.mkdir(parents=True)
        for i in range(per_class):
            img = rng.integers(0, 256, size=size)
            (d / f"img_{i}.pgm").write_bytes(write_pgm(img, maxval=255))
    return root


# --- directory loader -------------------------------------------------------

def test_load_dir_counts(tmp_path):
    ds = load_image_dir(make_tree(tmp_path / "data"), num_classes=10)
    assert len(ds) == 30
    assert ds.label_names == sorted(ds.label_names)
    assert sorted(set(ds.labels().tolist())) == list(range(10))
    assert all(s.image.shape == (48, 48) for s in ds.samples)


def test_load_dir_deterministic(tmp_path):
    root = make_tree(tmp_path / "data")
    a, b = load_image_dir(root), load_image_dir(root)
    assert [s.source_id for s in a.samples] == [s.source_id for s in b.samples]
    np.testing.assert_array_equal(a.images(), b.images())


def test_load_dir_names_unreadable_file(tmp_path):
    root = make_tree(tmp_path / "data", classes=3)
    bad = root / "class_01" / "img_1.pgm"
    bad.write_bytes(b"P5\n4 4\n255\n\x00\x01")
    with pytest.raises(IngestError) as info:
        load_image_dir(root)
    assert str(bad) in str(info.value)
    assert "img_0" not in str(info.value) and "img_2" not in str(info.value)


def test_load_dir_errors(tmp_path):
    with pytest.raises(IngestError, match="not found"):
        load_image_dir(tmp_path / "missing")
    (tmp_path / "empty").mkdir()
    with pytest.raises(IngestError):
        load_image_dir(tmp_path / "empty")
    root = make_tree(tmp_path / "nine", classes=9, per_class=1)
    with pytest.raises(ContractError, match="9 classes"):
        load_image_dir(root, num_classes=10)
    (root / "zz_empty").mkdir()
    with pytest.raises(IngestError, match="zz_empty"):
        load_image_dir(root)


def test_dataset_rejects_bad_labels():
    with pytest.raises(ContractError):
        Dataset([Sample(np.zeros((48, 48)), 2, "x")], ["a", "b"])
    with pytest.raises(ContractError):
        Dataset([], ["a", "a"])


# --- preprocessing ----------------------------------------------------------

def test_preprocess_constant():
    out = preprocess(np.full((48, 48), 7.0))
    assert out.shape == (48, 48)
    assert np.all(out == 0.0)


def test_preprocess_downsample_shape(nprng):
    assert preprocess(nprng.normal(size=(96, 96))).shape == (48, 48)
    assert preprocess(nprng.normal(size=(128, 100))).shape == (48, 48)


def direct_bilinear(img, y, x, scale):
    sy, sx = (y + 0.5) * scale - 0.5, (x + 0.5) * scale - 0.5
    y0, x0 = math.floor(sy), math.floor(sx)
    fy, fx = sy - y0, sx - x0
    return ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x0 + 1]
            + fy * (1 - fx) * img[y0 + 1, x0] + fy * fx * img[y0 + 1, x0 + 1])


def test_bilinear_ramp_oracle():
    i, j = np.indices((96, 96))
    ramp = 3.0 * i - 2.0 * j + 0.25 * i * j
    out = bilinear_resize(ramp, 48, 48)
    for y in range(1, 47):
        for x in range(1, 47):
            assert abs(out[y, x] - direct_bilinear(ramp, y, x, 2.0)) <= 1e-9
    lin = 3.0 * i - 2.0 * j
    np.testing.assert_allclose(preprocess(lin), preprocess(lin[::2, ::2] + 0.5 * (3.0 - 2.0)),
                               atol=1e-9)


@given(st.integers(2, 120), st.integers(2, 120), st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_preprocess_moments(h, w, seed):
    img = np.random.default_rng(seed).gamma(2.0, 3.0, size=(h, w))
    out = preprocess(img)
    assert abs(out.mean()) < 1e-9
    if out.std() > 0:
        assert abs(out.std() - 1.0) < 1e-6


def test_preprocess_modes(nprng):
    img = nprng.normal(size=(60, 80))
    assert preprocess(img, mode="crop").shape == (48, 48)
    assert preprocess(img, mode="resize").shape == (48, 48)
    with pytest.raises(ContractError):
        preprocess(img, mode="stretch")
    with pytest.raises(IngestError):
        preprocess(np.full((10, 10), 1.0), mode="crop")


def test_preprocess_rejects_nonfinite():
    img = np.zeros((48, 48))
    img[3, 3] = np.nan
    with pytest.raises(IngestError):
        preprocess(img)


# --- Phoenix ----------------------------------------------------------------

def test_phoenix_round_trip():
    header = {"NumberOfRows": "2", "NumberOfColumns": "2", "TargetType": "t72"}
    mag = np.array([[1.5, -2.25], [3.0e-3, 1e6]], dtype=np.float32)
    parsed, img = parse_phoenix(write_phoenix(header, mag, phase=np.ones((2, 2))))
    assert parsed == header
    np.testing.assert_array_equal(img, mag.astype(np.float64))


def test_phoenix_minimal():
    _, img = parse_phoenix(write_phoenix({"NumberOfRows": "1", "NumberOfColumns": "1"},
                                         np.array([[5.0]])))
    np.testing.assert_array_equal(img, [[5.0]])


def test_phoenix_truncated():
    buf = write_phoenix({"NumberOfRows": "2", "NumberOfColumns": "2"}, np.ones((2, 2)))
    magnitude_start = buf.index(PHOENIX_END.encode()) + len(PHOENIX_END) + 1
    with pytest.raises(TruncationError):
        parse_phoenix(buf[:magnitude_start + 6])


def test_phoenix_missing_pieces():
    with pytest.raises(FormatError, match="terminator"):
        parse_phoenix(b"NumberOfRows= 1\nNumberOfColumns= 1\n" + struct.pack(">f", 1.0))
    buf = write_phoenix({"NumberOfRows": "1"}, np.ones((1, 1)))
    with pytest.raises(FormatError, match="NumberOfColumns"):
        parse_phoenix(buf)


def test_phoenix_via_decode_image(tmp_path):
    mag = np.arange(64 * 64, dtype=np.float32).reshape(64, 64)
    path = tmp_path / "chip.raw"
    path.write_bytes(write_phoenix({"NumberOfRows": "64", "NumberOfColumns": "64"}, mag))
    np.testing.assert_array_equal(decode_image(path), mag)
    assert PHOENIX_END.encode() in path.read_bytes()


# --- image decoders ---------------------------------------------------------

@pytest.mark.parametrize("maxval", [255, 65535])
def test_pgm_round_trip(nprng, maxval):
    img = nprng.integers(0, maxval + 1, size=(5, 7))
    np.testing.assert_array_equal(read_pgm(write_pgm(img, maxval)), img)


def test_pgm_with_comment():
    buf = b"P5\n# made by hand\n2 1\n255\n\x03\x09"
    np.testing.assert_array_equal(read_pgm(buf), [[3.0, 9.0]])


def test_png_gray_and_rgb(tmp_path, nprng):
    gray = nprng.integers(0, 256, size=(6, 4)).astype(np.uint8)
    Image.fromarray(gray).save(tmp_path / "g.png")
    np.testing.assert_array_equal(decode_image(tmp_path / "g.png"), gray)

    rgb = nprng.integers(0, 256, size=(6, 4, 3)).astype(np.uint8)
    Image.fromarray(rgb).save(tmp_path / "c.png")
    expected = rgb @ np.array([0.299, 0.587, 0.114])
    np.testing.assert_allclose(decode_image(tmp_path / "c.png"), expected, atol=1e-9)


def test_decode_unknown_format(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"hello")
    with pytest.raises(IngestError, match="x.bin"):
        decode_image(path)


# --- synthetic --------------------------------------------------------------

def test_synthetic_deterministic_and_counts():
    a = gen_synthetic(20, seed=4)
    b = gen_synthetic(20, seed=4)
    assert len(a) == 200
    assert np.bincount(a.labels()).tolist() == [20] * 10
    np.testing.assert_array_equal(a.images(), b.images())
    assert a.label_names == synthetic_label_names()
    assert not np.array_equal(a.images(), gen_synthetic(20, seed=4, split="test").images())


def test_synthetic_templates_distinct():
    t = [synthetic_template(c) for c in range(10)]
    assert all(not np.array_equal(t[i], t[j]) for i in range(10) for j in range(i + 1, 10))
    # horizontal bar (0 degrees) lights the centre row, not the top-centre column
    assert t[0][24, 8:40].min() == 1.0 and t[0][2, 24] < 1.0


def test_synthetic_nearest_centroid():
    train, test = gen_synthetic(20, seed=1), gen_synthetic(10, seed=2, split="test")
    x, y = train.images().reshape(len(train), -1), train.labels()
    centroids = np.stack([x[y == c].mean(axis=0) for c in range(10)])
    q = test.images().reshape(len(test), -1)
    pred = np.argmin(((q[:, None, :] - centroids[None]) ** 2).sum(axis=2), axis=1)
    assert np.mean(pred == test.labels()) >= 0.90


def test_synthetic_tree_round_trip(tmp_path):
    paths = write_synthetic_tree(tmp_path / "s", 2, seed=5)
    assert len(paths) == 20
    ds = load_image_dir(tmp_path / "s", num_classes=10)
    assert ds.label_names == synthetic_label_names()
    assert np.bincount(ds.labels()).tolist() == [2] * 10


# --- batching ---------------------------------------------------------------

def test_batches_sizes_and_determinism():
    a = batches(10, 3, RngState(8))
    assert [len(c) for c in a] == [3, 3, 3, 1]
    b = batches(10, 3, RngState(8))
    assert [list(c) for c in a] == [list(c) for c in b]


@given(st.integers(0, 300), st.integers(1, 70), st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_batches_partition(n, size, seed):
    chunks = batches(n, size, RngState(seed))
    flat = [int(i) for c in chunks for i in c]
    assert sorted(flat) == list(range(n))
    assert all(len(c) == size for c in chunks[:-1])
