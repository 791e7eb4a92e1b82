import numpy as np
import pytest
import torch

from oracles import zero_weight_reconstruction
from stereosc.channel import ChannelConfig, QuantSpec
from stereosc.data import SceneSpec, synth_dataset
from stereosc.errors import ConfigError
from stereosc.layers import zero_parameters
from stereosc.metrics import effective_compression_ratio
from stereosc.model import PARAM_GROUPS, CodecConfig, SemanticSystem, gt_batch
from stereosc.pipeline import transmit_frame

SMALL = dict(features=8, rx_depth=1, tx_depth=1, channel_hidden=8)


def _boxes(ds):
    return [(b.u1, b.v1, b.u2, b.v2) for b in ds.boxes]


@pytest.fixture(scope="module")
def pairs():
    return synth_dataset(5, 3, SceneSpec(width=40, height=34))


@pytest.mark.parametrize("n,n1,n2,m", [(1, 1, 1, 6), (2, 2, 1, 6), (4, 2, 2, 8)])
def test_zero_weight_pipeline_matches_oracle(pairs, n, n1, n2, m):
    system = zero_parameters(SemanticSystem(CodecConfig(n=n, n1=n1, n2=n2, m=m, **SMALL)))
    for pair in pairs:
        res = transmit_frame(system, pair)
        for view, gt in (("left", pair.gt_left), ("right", pair.gt_right)):
            src = getattr(pair, view)
            want = zero_weight_reconstruction(src, _boxes(gt), n, m)
            np.testing.assert_allclose(getattr(res, view), want, atol=1e-6)


def test_zero_weight_ablations(pairs):
    system = zero_parameters(SemanticSystem(CodecConfig(**SMALL)))
    pair = pairs[0]
    glob = zero_weight_reconstruction(pair.left, [], 2, 6)
    np.testing.assert_allclose(transmit_frame(system, pair, ablation="global_only").left, glob,
                               atol=1e-6)
    key_only = transmit_frame(system, pair, ablation="key_only").left
    full = zero_weight_reconstruction(pair.left, _boxes(pair.gt_left), 2, 6)
    # without the global stream only box cells carry content
    outside = np.ones(pair.left.shape[:2], bool)
    for u1, v1, u2, v2 in _boxes(pair.gt_left):
        outside[int(v1) // 2 * 2:-(-int(v2) // 2) * 2, int(u1) // 2 * 2:-(-int(u2) // 2) * 2] = False
    assert np.all(key_only[outside] == 0)
    assert np.all(key_only <= full + 1e-6)
    with pytest.raises(ValueError):
        transmit_frame(system, pair, ablation="neither")


def test_noiseless_equals_direct_decode(pairs):
    system = SemanticSystem(CodecConfig(**SMALL)).eval()
    pair = pairs[1]
    res = transmit_frame(system, pair, ChannelConfig())
    batch = gt_batch([pair], system.cfg)
    with torch.no_grad():
        s = system.encode(batch)
        out = system.decode(s["k_l"], s["k_r"], s["g_l"], s["g_r"], batch)
    direct = batch.crop(out["i_l"]).clamp(0, 1)[0].permute(1, 2, 0).numpy()
    assert np.array_equal(res.left, direct)
    assert res.blocks == []


def test_noisy_transmission_deterministic(pairs):
    system = SemanticSystem(CodecConfig(**SMALL))
    cfg = ChannelConfig("rayleigh", 10.0, seed=3)
    a, b = transmit_frame(system, pairs[0], cfg), transmit_frame(system, pairs[0], cfg)
    assert np.array_equal(a.left, b.left) and np.array_equal(a.right, b.right)
    assert len(a.blocks) == 2  # key and global streams
    c = transmit_frame(system, pairs[0], ChannelConfig("rayleigh", 10.0, seed=4))
    assert not np.array_equal(a.left, c.left)


def test_quantised_mode_close_to_source(pairs):
    system = SemanticSystem(CodecConfig(**SMALL))
    ref = transmit_frame(system, pairs[0])
    q = transmit_frame(system, pairs[0], quant=QuantSpec(12))
    assert np.abs(ref.left - q.left).max() < 1e-2


def test_payload_ratio_examples():
    frame = SceneSpec(width=36, height=36, n_objects=0)
    pair = synth_dataset(0, 1, frame)[0]
    res = transmit_frame(SemanticSystem(CodecConfig(n=1, n1=1, n2=1, m=6, **SMALL)), pair)
    assert effective_compression_ratio(res.payload, pair) == pytest.approx(36.0)
    full = SceneSpec(width=24, height=24, n_objects=1, disparity=(0, 0), box_size=(24, 24))
    pair = synth_dataset(0, 1, full)[0]
    res = transmit_frame(SemanticSystem(CodecConfig(n=1, n1=1, n2=1, m=1, **SMALL)), pair)
    assert effective_compression_ratio(res.payload, pair) == pytest.approx(0.5)


def test_system_groups_and_config_validation():
    system = SemanticSystem(CodecConfig(**SMALL))
    assert all(sum(p.numel() for p in system.group(g).parameters()) > 0 for g in PARAM_GROUPS)
    with pytest.raises(KeyError):
        system.group("detector")
    with pytest.raises(ConfigError):
        CodecConfig(n=4, n1=2, n2=1)
    a, b = SemanticSystem(CodecConfig(**SMALL)), SemanticSystem(CodecConfig(**SMALL))
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
