import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from slicescope.dataset_io import (
    CsvSchema,
    DatasetBundle,
    DatasetError,
    FormatError,
    decode_binary,
    encode_binary,
    load_binary,
    load_csv,
    load_dataset,
    save_binary,
    save_csv,
    split,
    split_indices,
    split_sizes,
)


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_load_csv_wide(tmp_path):
    p = write(tmp_path / "a.csv", "id,loss,z0,z1\na,0.1,1,2\nb,0.2,3,4\nc,0.3,5,6\n")
    b = load_csv(p)
    assert (b.n, b.d) == (3, 2)
    np.testing.assert_array_equal(b.losses, [0.1, 0.2, 0.3])
    assert b.ids == ("a", "b", "c")
    assert b.correct is None and b.slice_label is None


def test_load_csv_packed_with_outcomes(tmp_path):
    p = write(tmp_path / "a.csv", "loss,correct,slice_label,embedding\n0.5,1,0,1.5;2\n0.0,false,true,3;4\n")
    b = load_csv(p)
    np.testing.assert_array_equal(b.embeddings, [[1.5, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(b.correct, [True, False])
    np.testing.assert_array_equal(b.slice_label, [False, True])
    assert b.sample_ids == ("row-0", "row-1")


def test_load_csv_explicit_schema(tmp_path):
    p = write(tmp_path / "a.csv", "err,f_a,f_b\n1,2,3\n")
    b = load_csv(p, CsvSchema(loss="err", embedding=["f_b", "f_a"]))
    np.testing.assert_array_equal(b.embeddings, [[3.0, 2.0]])


def test_nan_embedding_names_row_and_column(tmp_path):
    p = write(tmp_path / "a.csv", "loss,z0,z1\n0.1,1,2\n0.2,nan,4\n")
    with pytest.raises(DatasetError, match=r"row 1, column 'z0'"):
        load_csv(p)


def test_negative_loss_rejected(tmp_path):
    p = write(tmp_path / "a.csv", "loss,z0\n0.1,1\n-1,2\n")
    with pytest.raises(DatasetError, match="negative loss"):
        load_csv(p)


def test_non_numeric_and_ragged(tmp_path):
    with pytest.raises(DatasetError, match=r"non-numeric value 'x' at row 0, column 'z1'"):
        load_csv(write(tmp_path / "a.csv", "loss,z0,z1\n0.1,1,x\n"))
    with pytest.raises(DatasetError, match="ragged embedding at row 1"):
        load_csv(write(tmp_path / "b.csv", "loss,embedding\n0.1,1;2\n0.2,3\n"))


def test_missing_file_and_loss_column(tmp_path):
    with pytest.raises(DatasetError, match="no such file"):
        load_csv(tmp_path / "nope.csv")
    with pytest.raises(DatasetError, match="missing loss column 'loss'"):
        load_csv(write(tmp_path / "a.csv", "lss,z0\n0.1,1\n"))


def test_bundle_validation():
    with pytest.raises(DatasetError, match="row 0, column 1"):
        DatasetBundle(embeddings=[[0.0, np.inf]], losses=[0.0])
    with pytest.raises(DatasetError, match="losses has length"):
        DatasetBundle(embeddings=[[0.0], [1.0]], losses=[0.0])
    with pytest.raises(DatasetError, match="correct has length"):
        DatasetBundle(embeddings=[[0.0]], losses=[0.0], correct=[1, 0])
    b = DatasetBundle(embeddings=[[1.0]], losses=[0.5])
    with pytest.raises(ValueError):
        b.embeddings[0, 0] = 2.0


def test_csv_to_binary_round_trip(tmp_path):
    p = write(tmp_path / "a.csv", "id,loss,correct,z0,z1\nx,0.1,1,0.3,1e-7\ny,0.25,0,2,3\n")
    b = load_csv(p)
    save_binary(b, tmp_path / "a.slb")
    assert load_binary(tmp_path / "a.slb").equals(b)
    assert load_dataset(tmp_path / "a.slb").equals(b)


def test_csv_writer_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    b = DatasetBundle(
        embeddings=rng.normal(size=(5, 3)), losses=rng.random(5), correct=rng.random(5) < 0.5, ids=list("abcde")
    )
    save_csv(b, tmp_path / "b.csv")
    assert load_csv(tmp_path / "b.csv").equals(b)


def test_minimal_and_absent_optionals():
    b = DatasetBundle(embeddings=[[3.0]], losses=[0.0])
    back = decode_binary(encode_binary(b))
    assert back.equals(b) and back.correct is None and back.ids is None


def test_f32_on_disk_when_lossless():
    b = DatasetBundle(embeddings=[[0.5, 1.0]], losses=[0.25])
    data = encode_binary(b)
    assert len(data) == 20 + 3 * 4
    _, _, n, d, flags = struct.unpack_from("<4sIIII", data)
    assert (n, d, flags) == (1, 2, 0)


def test_bad_magic_and_truncation(tmp_path):
    b = DatasetBundle(embeddings=np.arange(10.0).reshape(5, 2), losses=np.ones(5))
    data = encode_binary(b)
    with pytest.raises(FormatError, match="unrecognized format"):
        decode_binary(b"XXXX" + data[4:])
    # header says n=5, payload only holds n=4
    short = data[:20] + data[20 : 20 + 8 * 4] + data[20 + 40 : 20 + 40 + 16]
    with pytest.raises(FormatError, match="truncated payload"):
        decode_binary(short)
    with pytest.raises(FormatError, match="length mismatch"):
        decode_binary(data + b"\0")
    (tmp_path / "bad.slb").write_bytes(b"nope")
    with pytest.raises(FormatError, match="unrecognized format"):
        load_dataset(tmp_path / "bad.slb")


finite = st.floats(allow_nan=False, allow_infinity=False, width=64, min_value=-1e300, max_value=1e300)


@st.composite
def bundles(draw):
    n = draw(st.integers(1, 12))
    d = draw(st.integers(1, 4))
    emb = draw(arrays(np.float64, (n, d), elements=finite))
    losses = draw(arrays(np.float64, n, elements=st.floats(0, 1e300)))
    correct = draw(st.none() | arrays(np.bool_, n))
    labels = draw(st.none() | arrays(np.bool_, n))
    ids = draw(st.none() | st.lists(st.text(max_size=8), min_size=n, max_size=n))
    return DatasetBundle(embeddings=emb, losses=losses, correct=correct, slice_label=labels, ids=ids)


@given(bundles(), st.sampled_from(["auto", "f64"]))
def test_binary_round_trip_is_bit_exact(bundle, precision):
    assert decode_binary(encode_binary(bundle, precision)).equals(bundle)


def test_split_examples():
    b = DatasetBundle(embeddings=np.arange(10.0)[:, None], losses=np.zeros(10))
    a, c = split(b, [0.5, 0.5], seed=7)
    assert a.n == c.n == 5
    assert sorted(np.concatenate([a.embeddings[:, 0], c.embeddings[:, 0]])) == list(range(10))
    a2, _ = split(b, [0.5, 0.5], seed=7)
    assert a2.equals(a)
    assert split_sizes(10, [0.99, 0.01]) == [9, 1]
    assert split_sizes(10, [0.34, 0.33, 0.33]) == [4, 3, 3]


def test_split_errors():
    with pytest.raises(DatasetError, match="empty part"):
        split_sizes(2, [0.5, 0.3, 0.2])
    with pytest.raises(DatasetError, match="sum to 1"):
        split_sizes(10, [0.5, 0.4])


@given(st.integers(3, 200), st.lists(st.floats(0.05, 1.0), min_size=1, max_size=3), st.integers(0, 2**31))
def test_split_is_a_seeded_partition(n, raw, seed):
    fr = [r / sum(raw) for r in raw]
    fr[-1] = 1.0 - sum(fr[:-1])
    try:
        parts = split_indices(n, fr, seed)
    except DatasetError:
        return
    allidx = np.concatenate(parts)
    assert sorted(allidx.tolist()) == list(range(n))
    assert all(p.size >= 1 for p in parts)
    assert all(np.array_equal(p, q) for p, q in zip(parts, split_indices(n, fr, seed)))
