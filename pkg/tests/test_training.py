import json

import pytest
import torch

from stereosc import training
from stereosc.data import SceneSpec, synth_dataset
from stereosc.errors import DivergenceError, PreconditionError, StateError
from stereosc.model import PARAM_GROUPS, CodecConfig, SemanticSystem
from stereosc.training import (DESK_TRAIN, TrainConfig, TrainState, default_schedules,
                               load_checkpoint, prepare_frames, run_stage, save_checkpoint)

TINY = CodecConfig(features=8, rx_depth=1, tx_depth=1, channel_hidden=8, flow_width=4)
TC = TrainConfig(batch_size=2)


@pytest.fixture(scope="module")
def frames():
    return prepare_frames(synth_dataset(1, 4, SceneSpec(width=24, height=24, box_size=(6, 12))))


def _state(seed=0):
    return TrainState(SemanticSystem(TINY), seed=seed)


def _snapshot(module):
    return {k: v.clone() for k, v in module.state_dict().items()}


def _same(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def test_reference_schedule():
    s = default_schedules()
    assert [p.epochs for p in s[1].phases] == [2, 10]
    assert [p.epochs for p in s[5].phases] == [25, 20]
    assert "flow" not in s[1].phases[0].lrs and "flow" in s[1].phases[1].lrs
    assert s[3].frozen_groups(s[3].phases[0]) == tuple(g for g in PARAM_GROUPS if g != "fusion")
    assert s[5].phases[0].loss == "mse" and s[5].phases[1].loss == "charbonnier"
    assert all(p.epochs == 3 for st in default_schedules(3).values() for p in st.phases)
    with pytest.raises(ValueError):
        training.Phase("x", 0, {"fusion": 1e-4}, "mse", "channel")


def test_prerequisites_enforced(frames):
    with pytest.raises(StateError):
        run_stage(default_schedules(1)[3], _state(), frames, TC)
    with pytest.raises(PreconditionError):
        run_stage(default_schedules(1)[1], _state(), [], TC)


def test_frozen_groups_bit_identical(frames):
    state = _state()
    before = {g: _snapshot(state.system.group(g)) for g in PARAM_GROUPS}
    # only the first phase (flow frozen)
    run_stage(default_schedules(1)[1], state, frames, TC, max_epochs=1)
    after = {g: _snapshot(state.system.group(g)) for g in PARAM_GROUPS}
    for g in ("key_tx", "key_rx", "flow", "channel"):
        assert _same(before[g], after[g]), g
    for g in ("global_tx", "global_rx", "fusion"):
        assert not _same(before[g], after[g]), g
    assert all(p.requires_grad for p in state.system.parameters())


def test_stage_two_touches_only_key_groups(frames):
    state = _state()
    run_stage(default_schedules(1)[1], state, frames, TC)
    before = {g: _snapshot(state.system.group(g)) for g in PARAM_GROUPS}
    run_stage(default_schedules(1)[2], state, frames, TC)
    for g in PARAM_GROUPS:
        assert _same(before[g], _snapshot(state.system.group(g))) == (g not in ("key_tx", "key_rx"))
    assert state.completed == [1, 2]


def test_deterministic_histories(frames):
    a, b = _state(), _state()
    for st in (a, b):
        run_stage(default_schedules(1)[1], st, frames, TC)
    assert a.history == b.history and len(a.history) == 2
    assert all(torch.equal(p, q) for p, q in zip(a.system.parameters(), b.system.parameters()))


def test_divergence_dumps_diagnostics(frames, tmp_path, monkeypatch):
    def nan_loss(system, *args, **kw):
        return sum(p.sum() for p in system.fusion.parameters()) * float("nan")

    monkeypatch.setattr(training, "phase_loss", nan_loss)
    diag = tmp_path / "diag.json"
    with pytest.raises(DivergenceError):
        run_stage(default_schedules(1)[1], _state(), frames, TC, diagnostics_path=diag)
    info = json.loads(diag.read_text())
    assert info["stage"] == 1 and info["phase"] == "1a"


def test_hybrid_switch_at_seventy_percent(frames, monkeypatch):
    seen = []
    real = training.phase_loss

    def spy(system, batch, phase, loss_name, tc, channel=None):
        seen.append(loss_name)
        return real(system, batch, phase, loss_name, tc, channel)

    monkeypatch.setattr(training, "phase_loss", spy)
    state = _state()
    state.completed = [1, 2, 3]
    run_stage(default_schedules(10)[4], state, frames[:2], TC)
    assert seen == ["hybrid"] * 7 + ["charbonnier"] * 3


def test_training_snr_draws():
    cfgs = [training._channel_for_step(TC, 0, 5, "5a", e, s) for e in range(10) for s in (0, 2)]
    assert all(6.0 <= c.snr_db <= 18.0 for c in cfgs)
    assert len({c.snr_db for c in cfgs}) == len(cfgs)
    again = training._channel_for_step(TC, 0, 5, "5a", 3, 2)
    assert again == cfgs[7]


def test_checkpoint_round_trip(tmp_path, frames):
    state = _state()
    run_stage(default_schedules(1)[1], state, frames, TC)
    path = tmp_path / "ck.pt"
    save_checkpoint(path, state)
    loaded = load_checkpoint(path, TINY)
    assert loaded.completed == [1] and loaded.history == state.history
    assert all(torch.equal(p, q) for p, q in
               zip(state.system.state_dict().values(), loaded.system.state_dict().values()))
    # one further step from each is identical
    for st in (state, loaded):
        run_stage(default_schedules(1)[2], st, frames, TC, max_epochs=1)
    assert state.history == loaded.history
    assert all(torch.equal(p, q) for p, q in zip(state.system.parameters(), loaded.system.parameters()))
    with pytest.raises(StateError):
        load_checkpoint(path, CodecConfig(features=16, rx_depth=1, tx_depth=1))
    bad = tmp_path / "bad.pt"
    torch.save({"format": "other"}, bad)
    with pytest.raises(StateError):
        load_checkpoint(bad)


def test_resume_mid_stage_matches_uninterrupted(tmp_path, frames):
    sched = default_schedules(2)[1]
    full = _state()
    run_stage(sched, full, frames, TC)

    path = tmp_path / "progress.pt"
    part = _state()
    run_stage(sched, part, frames, TC, checkpoint_path=path, max_epochs=1)
    assert part.position == {"stage": 1, "phase": 0, "epoch": 1, "optimizer": part.position["optimizer"]}
    resumed = load_checkpoint(path)
    run_stage(sched, resumed, frames, TC, checkpoint_path=path, max_epochs=2)
    run_stage(sched, resumed, frames, TC, checkpoint_path=path)
    assert resumed.history == full.history
    assert all(torch.equal(p, q) for p, q in zip(full.system.parameters(), resumed.system.parameters()))
    assert load_checkpoint(path).completed == [1]


def test_smoke_schedule_reduces_loss():
    torch.manual_seed(0)
    frames = prepare_frames(synth_dataset(0, 16, SceneSpec()))
    state = TrainState(SemanticSystem(CodecConfig()), seed=0)
    for sid, sched in default_schedules(2).items():
        if sid == 5:
            break
        run_stage(sched, state, frames, DESK_TRAIN)
    first = state.history[0]
    last = [h for h in state.history if h["stage"] == 4][-1]
    assert first["stage"] == 1 and first["epoch"] == 0
    assert last["loss"] < first["loss"]
