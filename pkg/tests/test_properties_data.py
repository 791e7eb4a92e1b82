from hypothesis import given, settings
from hypothesis import strategies as st

from stereosc.data import BBox2D, classify_difficulty

heights = st.floats(1, 200, allow_nan=False)
occ = st.integers(0, 3)
trunc = st.floats(0, 1, allow_nan=False)


@settings(max_examples=300, deadline=None)
@given(heights, occ, trunc, st.floats(0, 50), st.integers(0, 2), st.floats(0, 0.5))
def test_difficulty_monotone(h, o, t, dh, do, dt):
    easy = classify_difficulty(BBox2D(0, 0, 10, h, occlusion=o, truncation=t))
    harder = classify_difficulty(BBox2D(0, 0, 10, max(h - dh, 0.5), occlusion=o + do,
                                        truncation=min(t + dt, 1.0)))
    assert harder >= easy
