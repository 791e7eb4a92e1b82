import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stereosc.layers import pixel_shuffle, pixel_unshuffle


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 4), st.integers(1, 4),
       st.integers(0, 2**31 - 1))
def test_unshuffle_preserves_multiset_and_inverts(n, c, hb, wb, seed):
    g = torch.Generator().manual_seed(seed)
    t = torch.randn(1, c, hb * n, wb * n, generator=g)
    u = pixel_unshuffle(t, n)
    assert u.shape == (1, c * n * n, hb, wb)
    assert torch.equal(torch.sort(u.flatten()).values, torch.sort(t.flatten()).values)
    assert torch.equal(pixel_shuffle(u, n), t)
