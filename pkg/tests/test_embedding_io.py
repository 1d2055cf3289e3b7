import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mca.embedding_io import (ROOT, DatasetBundle, EmbeddingMatrix, TaxonomyTree,
                              VocabularyBundle, l2_normalize, load_dataset, load_embeddings,
                              load_taxonomy, load_vocabulary, save_dataset, save_embeddings,
                              save_taxonomy)
from mca.errors import DataError, TaxonomyError


def write_raw(path, n, d, values, magic=b"MCAE", version=1):
    path.write_bytes(struct.pack("<4sIII", magic, version, n, d)
                     + np.asarray(values, dtype="<f4").tobytes())


def test_load_two_by_three(tmp_path):
    p = tmp_path / "e.mcae"
    write_raw(p, 2, 3, [1, 2, 3, 4, 5, 6])
    m = load_embeddings(p)
    assert (m.n, m.d) == (2, 3)
    assert m.ids == ("0", "1")
    np.testing.assert_array_equal(m.data, [[1, 2, 3], [4, 5, 6]])


def test_rows_not_normalized_on_load(tmp_path):
    p = tmp_path / "e.mcae"
    write_raw(p, 1, 2, [3, 4])
    np.testing.assert_array_equal(load_embeddings(p).data, [[3, 4]])


def test_save_of_load_is_byte_identical(tmp_path, rng):
    p = tmp_path / "a.mcae"
    write_raw(p, 5, 7, rng.normal(size=35))
    q = tmp_path / "b.mcae"
    save_embeddings(q, load_embeddings(p))
    assert q.read_bytes() == p.read_bytes()


def test_d512_accepted(tmp_path, rng):
    p = tmp_path / "stl.mcae"
    write_raw(p, 3, 512, rng.normal(size=3 * 512))
    assert load_embeddings(p).d == 512


@pytest.mark.parametrize("case", ["magic", "version", "d0", "truncated", "trailing", "overflow",
                                  "short_header"])
def test_malformed_files_rejected(tmp_path, case):
    p = tmp_path / "bad.mcae"
    if case == "magic":
        write_raw(p, 1, 2, [1, 2], magic=b"XXXX")
    elif case == "version":
        write_raw(p, 1, 2, [1, 2], version=2)
    elif case == "d0":
        write_raw(p, 1, 0, [])
    elif case == "truncated":
        write_raw(p, 2, 2, [1, 2, 3])
    elif case == "trailing":
        write_raw(p, 1, 2, [1, 2, 3])
    elif case == "overflow":
        write_raw(p, 0x10000, 0x10001, [])
    else:
        p.write_bytes(b"MCAE\x01")
    with pytest.raises(DataError):
        load_embeddings(p)


def test_missing_file_is_data_error(tmp_path):
    with pytest.raises(DataError):
        load_embeddings(tmp_path / "nope.mcae")


def test_matrix_invariants():
    with pytest.raises(DataError):
        EmbeddingMatrix(np.ones((2, 1)))
    with pytest.raises(DataError):
        EmbeddingMatrix(np.ones((0, 3)))
    with pytest.raises(DataError):
        EmbeddingMatrix(np.ones((2, 3)), ("a", "a"))
    with pytest.raises(DataError):
        EmbeddingMatrix(np.ones((2, 3)), ("a",))


def test_sidecar_roundtrip(tmp_path, rng):
    m = EmbeddingMatrix(rng.normal(size=(4, 3)).astype(np.float32), ("w", "x", "y", "z"))
    ds = DatasetBundle(m, np.array([0, 1, 1, 0]), 2)
    save_dataset(tmp_path / "d.mcae", ds)
    back = load_dataset(tmp_path / "d.mcae")
    assert back.images.ids == m.ids
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.c == 2
    np.testing.assert_array_equal(back.images.data, m.data)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(2, 6)),
              elements=st.floats(-1e3, 1e3, width=32)))
def test_load_save_identity(tmp_path_factory, data):
    p = tmp_path_factory.mktemp("rt") / "x.mcae"
    m = EmbeddingMatrix(data)
    save_embeddings(p, m)
    back = load_embeddings(p)
    assert back.ids == m.ids
    assert back.data.tobytes() == m.data.tobytes()


# normalization

def test_normalize_three_four():
    out = l2_normalize(EmbeddingMatrix(np.array([[3.0, 4.0]])))
    np.testing.assert_allclose(out.data, [[0.6, 0.8]], atol=1e-7)


def test_unit_row_unchanged():
    row = np.array([[0.0, 1.0, 0.0]], dtype=np.float32)
    np.testing.assert_array_equal(l2_normalize(EmbeddingMatrix(row)).data, row)


def test_random_norms(rng):
    out = l2_normalize(EmbeddingMatrix(rng.normal(size=(5, 4))))
    norms = np.sqrt((out.data.astype(np.float64) ** 2).sum(1))
    assert np.all(np.abs(norms - 1) < 1e-6)


def test_zero_row_rejected():
    with pytest.raises(DataError, match="row 1"):
        l2_normalize(EmbeddingMatrix(np.array([[1.0, 0.0], [0.0, 0.0]])))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(2, 8)),
              elements=st.floats(-100, 100)).filter(
                  lambda a: np.all(np.linalg.norm(a, axis=1) > 1e-3)))
def test_normalize_properties(a):
    once = l2_normalize(EmbeddingMatrix(a))
    twice = l2_normalize(once)
    norms = np.linalg.norm(once.data.astype(np.float64), axis=1)
    assert np.all(np.abs(norms - 1) <= 1e-5)
    np.testing.assert_allclose(twice.data, once.data, atol=1e-6)


# taxonomy

def test_taxonomy_depths(tmp_path):
    p = tmp_path / "t.tsv"
    save_taxonomy(p, [("dog", "mammal"), ("cat", "mammal"), ("mammal", ROOT)])
    tree = load_taxonomy(p, ["dog", "cat", "mammal", "rock"])
    assert tree.depth_of("dog") == 2
    assert tree.depth_of("mammal") == 1
    assert tree.depth_of(ROOT) == 0
    assert math.isinf(tree.depth_of("rock"))
    assert tree.orphans == {"rock"}


def test_cycle_rejected():
    with pytest.raises(TaxonomyError):
        TaxonomyTree.from_edges([("a", "b"), ("b", "a")])


def test_conflicting_parent_rejected():
    with pytest.raises(TaxonomyError):
        TaxonomyTree.from_edges([("a", ROOT), ("a", "b"), ("b", ROOT)])


def test_chain_of_twelve():
    edges = [("n1", ROOT)] + [(f"n{i}", f"n{i - 1}") for i in range(2, 13)]
    assert TaxonomyTree.from_edges(edges).max_depth == 12


def test_malformed_taxonomy_line(tmp_path):
    p = tmp_path / "t.tsv"
    p.write_text("dog mammal\n")
    with pytest.raises(TaxonomyError):
        load_taxonomy(p)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 30), min_size=1, max_size=30))
def test_depth_is_parent_plus_one(parents):
    # node i's parent is an earlier node (or ROOT), so the edge list is always a forest
    edges = [(f"w{i}", ROOT if i == 0 else f"w{p % i}") for i, p in enumerate(parents)]
    tree = TaxonomyTree.from_edges(edges)
    for child, par in edges:
        assert tree.depth[child] == tree.depth[par] + 1


def test_vocabulary_edges_must_be_known_words(rng):
    emb = EmbeddingMatrix(rng.normal(size=(2, 3)), ("a", "b"))
    VocabularyBundle(("a", "b"), emb, (("a", ROOT), ("b", "a")))
    with pytest.raises(DataError):
        VocabularyBundle(("a", "b"), emb, (("a", "zzz"),))


def test_load_vocabulary(tmp_path, rng):
    emb = EmbeddingMatrix(rng.normal(size=(2, 3)), ("a", "b"))
    save_embeddings(tmp_path / "w.mcae", emb)
    save_taxonomy(tmp_path / "t.tsv", [("a", ROOT), ("b", "a")])
    vocab = load_vocabulary(tmp_path / "w.mcae", tmp_path / "t.tsv")
    assert vocab.words == ("a", "b")
    assert vocab.tree().depth_of("b") == 2
