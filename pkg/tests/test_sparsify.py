import itertools

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from lagsgd.errors import StructureError
from lagsgd.layered import LayerShape
from lagsgd.sparsify import (
    CompressionPolicy,
    FusionBuffer,
    SparseChunk,
    decode_chunk,
    decode_message,
    decompress,
    encode_chunk,
    encode_message,
    fusion_flush,
    rand_k,
    sampled_top_k,
    top_k,
)


def residual_sq(x, selected):
    """Sum of squares over the non-selected positions, in index order."""
    mask = np.ones(x.size, dtype=bool)
    mask[list(selected)] = False
    sq = x * x
    return float(np.sum(sq[mask]))


# --- top_k ---------------------------------------------------------------------


def test_top_k_picks_largest_magnitudes():
    chunk = top_k(np.array([3.0, -5.0, 1.0, 0.5]), 2)
    assert_array_equal(chunk.indices, [0, 1])
    assert_array_equal(chunk.values, [3.0, -5.0])
    # Brute force agrees that {0, 1} leaves the smallest residual.
    x = np.array([3.0, -5.0, 1.0, 0.5])
    best = min(residual_sq(x, s) for s in itertools.combinations(range(4), 2))
    assert residual_sq(x, chunk.indices) == best


def test_top_k_full_selection_reconstructs():
    rng = np.random.default_rng(4)
    x = rng.standard_normal(17)
    assert_array_equal(decompress(top_k(x, x.size)), x)


def test_top_k_zero_vector_empty():
    chunk = top_k(np.zeros(3), 2)
    assert len(chunk) == 0
    assert_array_equal(decompress(chunk), np.zeros(3))


def test_top_k_tie_breaks_to_lower_index():
    x = np.array([2.0, -2.0, 1.0])
    chunk = top_k(x, 1)
    assert_array_equal(chunk.indices, [0])
    assert_array_equal(chunk.values, [2.0])
    # Either tie choice leaves an equal residual norm.
    assert residual_sq(x, [0]) == residual_sq(x, [1])


def test_top_k_argument_errors():
    x = np.array([1.0, 2.0])
    with pytest.raises(ValueError):
        top_k(x, 0)
    with pytest.raises(ValueError):
        top_k(x, 3)


def test_top_k_brute_force_optimality():
    # Small-dimension exhaustive check: the selection always minimizes the
    # residual norm over every k-subset of entries.
    rng = np.random.default_rng(5)
    for _ in range(300):
        d = int(rng.integers(2, 13))
        k = int(rng.integers(1, min(d, 6) + 1))
        x = rng.standard_normal(d)
        chunk = top_k(x, k)
        ours = residual_sq(x, chunk.indices)
        best = min(residual_sq(x, s) for s in itertools.combinations(range(d), k))
        assert ours == best


def test_top_k_residual_identity_bitwise():
    rng = np.random.default_rng(6)
    for _ in range(50):
        x = rng.standard_normal(40)
        chunk = top_k(x, 7)
        reconstructed = decompress(chunk)
        residual = x - reconstructed
        assert_array_equal(reconstructed + residual, x)


def test_top_k_beats_random_selection_expectation():
    rng = np.random.default_rng(7)
    for _ in range(200):
        d = int(rng.integers(2, 50))
        k = int(rng.integers(1, d + 1))
        x = rng.standard_normal(d)
        res = residual_sq(x, top_k(x, k).indices)
        assert res <= (1 - k / d) * float(x @ x) + 1e-12


# --- rand_k --------------------------------------------------------------------


def test_rand_k_full_is_identity():
    x = np.array([1.0, 0.0, -2.0])
    for seed in range(5):
        chunk = rand_k(x, 3, np.random.default_rng(seed))
        assert_array_equal(decompress(chunk), x)


def test_rand_k_deterministic_per_seed():
    x = np.arange(10.0)
    a = rand_k(x, 4, np.random.default_rng(42))
    b = rand_k(x, 4, np.random.default_rng(42))
    assert_array_equal(a.indices, b.indices)
    assert_array_equal(a.values, b.values)


def test_rand_k_expected_residual():
    # Mean over many seeds of the squared residual matches (1 - k/d) ||x||^2;
    # for x = [1, 2, 3, 4], k = 2 that value is 15.
    x = np.array([1.0, 2.0, 3.0, 4.0])
    total = 0.0
    n = 10**5
    for seed in range(n):
        diff = x - decompress(rand_k(x, 2, np.random.default_rng(seed)))
        total += float(diff @ diff)
    assert_allclose(total / n, 15.0, rtol=0.01)


# --- sampled_top_k -------------------------------------------------------------


def test_sampled_full_fraction_matches_exact():
    rng = np.random.default_rng(8)
    for _ in range(20):
        x = rng.standard_normal(30)
        exact = top_k(x, 5)
        approx = sampled_top_k(x, 5, 1.0, np.random.default_rng(0))
        assert_array_equal(approx.indices, exact.indices)
        assert_array_equal(approx.values, exact.values)


def test_sampled_covers_exact_top_entries():
    # Geometric magnitudes: the two largest entries must always be kept,
    # whether the sampled threshold is used or the exact fallback fires.
    x = np.array([2.0**-i for i in range(16)])
    exact_top2 = set(top_k(x, 2).indices.tolist())
    for seed in range(100):
        chunk = sampled_top_k(x, 4, 0.5, np.random.default_rng(seed))
        assert exact_top2.issubset(set(chunk.indices.tolist()))
        assert len(chunk) <= 8  # never more than twice the budget


def test_sampled_zero_vector():
    chunk = sampled_top_k(np.zeros(12), 3, 0.5, np.random.default_rng(0))
    assert len(chunk) == 0


def test_sampled_rejects_bad_fraction():
    with pytest.raises(ValueError):
        sampled_top_k(np.ones(4), 2, 0.0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sampled_top_k(np.ones(4), 2, 1.5, np.random.default_rng(0))


# --- decompress / chunk invariants ---------------------------------------------


def test_decompress_empty_chunk():
    chunk = SparseChunk(0, 3, np.array([], dtype=np.int64), np.array([]), k_target=2)
    assert_array_equal(decompress(chunk), [0.0, 0.0, 0.0])


def test_decompress_preserves_values_bitwise():
    rng = np.random.default_rng(9)
    x = rng.standard_normal(25)
    chunk = top_k(x, 6)
    dense = decompress(chunk)
    assert_array_equal(dense[chunk.indices], chunk.values)
    assert_array_equal(chunk.values, x[chunk.indices])


def test_chunk_invariants_enforced():
    with pytest.raises(StructureError):
        SparseChunk(0, 4, np.array([2, 1]), np.array([1.0, 2.0]), k_target=2)
    with pytest.raises(StructureError):
        SparseChunk(0, 4, np.array([1, 1]), np.array([1.0, 2.0]), k_target=2)
    with pytest.raises(StructureError):
        SparseChunk(0, 4, np.array([0, 5]), np.array([1.0, 2.0]), k_target=2)
    with pytest.raises(StructureError):
        SparseChunk(0, 4, np.array([0, 1, 2]), np.array([1.0, 2.0, 3.0]), k_target=2)


def test_float32_mode_for_timing_realism():
    # Single-precision inputs flow through selection with their dtype kept
    # and a 4-byte value width in the size accounting; identity-grade checks
    # stay on the 64-bit path.
    rng = np.random.default_rng(11)
    x = rng.standard_normal(256).astype(np.float32)
    chunk = sampled_top_k(x, 16, 0.25, np.random.default_rng(0))
    assert chunk.values.dtype == np.float32
    assert decompress(chunk).dtype == np.float32
    assert chunk.nbytes(value_width=4) == 8 + len(chunk) * 8


# --- compression policy ---------------------------------------------------------


def test_policy_selection_counts():
    shape = (LayerShape(1, 100), LayerShape(2, 15), LayerShape(3, 3))
    policy = CompressionPolicy({1: 10.0, 2: 10.0, 3: 10.0}, ratio_cap=10.0)
    counts = policy.selection_counts(shape)
    assert counts == {1: 10, 2: 1, 3: 1}
    # Flooring makes the realized ratio exceed the configured one on layers
    # whose dim is not a multiple of the ratio.
    assert policy.effective_max_ratio(shape) == 15.0


def test_policy_validation():
    with pytest.raises(ValueError):
        CompressionPolicy({1: 0.5}, ratio_cap=10.0)
    with pytest.raises(ValueError):
        CompressionPolicy({1: 20.0}, ratio_cap=10.0)


# --- fusion ----------------------------------------------------------------------


def _chunk_with_entries(layer_id, n, dim=64):
    idx = np.arange(n, dtype=np.int64)
    vals = np.arange(1.0, n + 1.0)
    return SparseChunk(layer_id, dim, idx, vals, k_target=n)


def test_fusion_empty_buffer():
    assert fusion_flush([], 1000, first_layer_done=True) is None


def test_fusion_flush_on_capacity():
    # Two 104-byte chunks against a 150-byte capacity: the first insert
    # stays buffered, the second trips the size rule.
    buf = FusionBuffer(capacity_bytes=150)
    c1 = _chunk_with_entries(1, 8)
    c2 = _chunk_with_entries(2, 8)
    assert c1.nbytes() == 104
    assert buf.push(c1) is None
    msg = buf.push(c2)
    assert msg is not None
    assert [c.layer_id for c in msg.chunks] == [1, 2]
    assert buf.pending_bytes() == 0


def test_fusion_holds_below_capacity():
    assert fusion_flush([_chunk_with_entries(1, 2)], 1000, first_layer_done=False) is None


def test_fusion_flushes_on_first_layer():
    msg = fusion_flush([_chunk_with_entries(1, 2)], 1000, first_layer_done=True)
    assert msg is not None and len(msg.chunks) == 1


def test_fusion_rejects_oversized_chunk():
    with pytest.raises(ValueError):
        fusion_flush([_chunk_with_entries(1, 20)], 100, first_layer_done=False)


def test_fusion_rejects_duplicate_layers():
    with pytest.raises(StructureError):
        fusion_flush([_chunk_with_entries(1, 2), _chunk_with_entries(1, 3)], 10**6, True)


def test_fusion_preserves_chunk_contents():
    chunks = [_chunk_with_entries(1, 3), _chunk_with_entries(2, 5)]
    msg = fusion_flush(chunks, 10**6, first_layer_done=True)
    for orig, kept in zip(chunks, msg.chunks):
        assert kept is orig


# --- wire format ------------------------------------------------------------------


def test_chunk_wire_round_trip():
    rng = np.random.default_rng(10)
    for _ in range(30):
        x = rng.standard_normal(50)
        chunk = top_k(x, int(rng.integers(1, 20)), layer_id=int(rng.integers(0, 9)))
        raw = encode_chunk(chunk)
        back, offset = decode_chunk(raw)
        assert offset == len(raw)
        assert back.layer_id == chunk.layer_id and back.dim == chunk.dim
        assert_array_equal(back.indices, chunk.indices)
        assert_array_equal(back.values, chunk.values)
        # Bytes survive a second pass untouched.
        assert encode_chunk(back) == raw


def test_chunk_wire_size():
    chunk = _chunk_with_entries(3, 5)
    assert len(encode_chunk(chunk)) == 12 + 5 * 12


def test_message_wire_round_trip():
    chunks = [_chunk_with_entries(1, 3), _chunk_with_entries(2, 1), _chunk_with_entries(3, 7)]
    msg = fusion_flush(chunks, 10**6, first_layer_done=True)
    raw = encode_message(msg)
    back = decode_message(raw)
    assert len(back.chunks) == 3
    assert encode_message(back) == raw
    for orig, got in zip(chunks, back.chunks):
        assert_array_equal(got.indices, orig.indices)
        assert_array_equal(got.values, orig.values)


def test_wire_rejects_truncation():
    raw = encode_chunk(_chunk_with_entries(1, 4))
    with pytest.raises(StructureError):
        decode_chunk(raw[:-3])
    msg = encode_message(fusion_flush([_chunk_with_entries(1, 2)], 10**6, True))
    with pytest.raises(StructureError):
        decode_message(msg + b"\x00")
