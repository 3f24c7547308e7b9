"""Tour of the compression operators and the sparse wire format.

Shows magnitude selection against random selection, the error-feedback
residual identity, the sampled approximation, and a chunk surviving its
trip through the byte encoding.
"""

import numpy as np

from lagsgd import decode_message, decompress, encode_message, fusion_flush, rand_k, sampled_top_k, top_k

rng = np.random.default_rng(0)
x = rng.standard_normal(32) * np.logspace(0, -3, 32)  # decaying magnitudes

print("input head:", np.round(x[:6], 4))

exact = top_k(x, 4)
print("\ntop-4 keeps indices", exact.indices.tolist())
residual = x - decompress(exact)
print("residual + reconstruction == input:", bool(np.array_equal(decompress(exact) + residual, x)))
print("residual norm^2:", float(residual @ residual))

random_pick = rand_k(x, 4, np.random.default_rng(7))
r = x - decompress(random_pick)
print("\nrand-4 keeps indices", random_pick.indices.tolist())
print("rand-4 residual norm^2:", float(r @ r), "(top-k is always <= this in expectation)")

approx = sampled_top_k(x, 4, sample_fraction=0.5, rng=np.random.default_rng(3))
print("\nsampled top-4 keeps", len(approx), "entries:", approx.indices.tolist())

# Fusion: small chunks ride together in one message.
chunks = [top_k(rng.standard_normal(64), 5, layer_id=lid) for lid in (1, 2, 3)]
message = fusion_flush(chunks, capacity_bytes=10**6, first_layer_done=True)
wire = encode_message(message)
back = decode_message(wire)
print(f"\nfused {len(message.chunks)} chunks into {len(wire)} bytes;",
      "byte-exact round trip:", encode_message(back) == wire)
