import numpy as np
import pytest
import torch

from timar.context import AGENT_HEAD, SEP, TurnTokens
from timar.diffusion import sample
from timar.normalize import NormStats
from timar.rng import seeded_rng
from timar.streamer import ContextBuffer, StreamError, Streamer, run_conversation

from conftest import lively_model, random_conversation, tiny_config, unit_norm


def test_streamed_tokens_match_training_tokens():
    from timar.datagen import gen_sample
    from timar.streamer import conversation_turns
    from timar.trainer import fit_norm, prepare

    cfg = tiny_config(f_s=16000, f_w=50, f_h=25, N_max=8, d_raw=32)
    sample_ = gen_sample(7)
    data = prepare([sample_], cfg)
    norm = fit_norm(data)
    model = lively_model(cfg)
    with torch.no_grad():
        offline = model.tokenize_turns(norm.normalize_features(data.feats_u[0]), norm.normalize_features(data.feats_a[0]),
                                       norm.normalize(data.head_u[0]))
        streamer = Streamer(model, norm, 2)
        for t, turn in enumerate(conversation_turns(sample_, cfg)[:4]):
            live = streamer.push_turn(*turn)
            for name in ("user_speech", "agent_speech", "user_head", "agent_head"):
                assert torch.allclose(getattr(live, name), getattr(offline[t], name), atol=1e-5, rtol=0), (t, name)


def test_push_turn_fills_agent_slots_with_mask():
    cfg = tiny_config(f_s=16000, f_h=25)
    model = lively_model(cfg)
    streamer = Streamer(model, unit_norm(), 2)
    S_u, S_a, H_u = random_conversation(cfg, 1)[0]
    turn = streamer.push_turn(S_u, S_a, H_u)
    assert turn.agent_head.shape == (25, cfg.d_t)
    assert torch.all(turn.agent_head == model.tokens.mask)
    assert bool(turn.agent_head_is_mask.all())
    assert len(streamer.buffer) == 0
    with pytest.raises(StreamError, match="user head"):
        streamer.push_turn(S_u, S_a, H_u[:24])
    with pytest.raises(StreamError, match="speech"):
        streamer.push_turn(S_u[:-1], S_a, H_u)


def test_zero_weights_leave_only_mask_rows():
    cfg = tiny_config()
    model = lively_model(cfg)
    with torch.no_grad():
        for module in (model.speech, model.head):
            for p in module.parameters():
                p.zero_()
    streamer = Streamer(model, unit_norm(), 0)
    turn = streamer.push_turn(np.zeros(cfg.chunk_samples), np.zeros(cfg.chunk_samples), np.zeros((cfg.K_frames, 56)))
    ctx = model.context([turn])
    content = ctx.modality_id != SEP
    agent = ctx.modality_id == AGENT_HEAD
    assert torch.count_nonzero(ctx.tokens[torch.from_numpy(content & ~agent)]) == 0
    assert torch.all(ctx.tokens[torch.from_numpy(agent)] == model.tokens.mask)


def test_buffer_rules():
    buf = ContextBuffer(2)
    mk = lambda v, masked=True: TurnTokens(*(torch.full((3, 4), float(v)) for _ in range(4)),
                                           torch.full((3,), masked))
    for v in range(4):
        buf.append(mk(v))
    assert len(buf) == 2 and [float(t.user_speech[0, 0]) for t in buf] == [2.0, 3.0]
    with pytest.raises(StreamError):
        buf.append(mk(9, masked=False))
    empty = ContextBuffer(0)
    empty.append(mk(1))
    assert len(empty) == 0
    with pytest.raises(StreamError):
        ContextBuffer(-1)


def test_n0_output_shape_and_conversation_length():
    cfg = tiny_config()
    model = lively_model(cfg)
    out = run_conversation(model, unit_norm(), random_conversation(cfg, 1), 0, steps_out=5)
    assert out.shape == (cfg.K_frames, 56)
    out = run_conversation(model, unit_norm(), random_conversation(cfg, 8), 3, steps_out=5)
    assert out.shape == (8 * cfg.K_frames, 56)


def test_default_rate_conversation():
    cfg = tiny_config(f_s=16000, f_h=25, N_max=8)
    model = lively_model(cfg)
    out = run_conversation(model, unit_norm(), random_conversation(cfg, 8), 7, steps_out=3)
    assert out.shape == (200, 56)


def test_deterministic_replay():
    cfg = tiny_config()
    model = lively_model(cfg)
    conv = random_conversation(cfg, 5)
    a = run_conversation(model, unit_norm(), conv, 2, omega=1.5, steps_out=5, seed=4, conversation="c")
    b = run_conversation(model, unit_norm(), conv, 2, omega=1.5, steps_out=5, seed=4, conversation="c")
    assert np.array_equal(a, b)
    c = run_conversation(model, unit_norm(), conv, 2, omega=1.5, steps_out=5, seed=5, conversation="c")
    assert not np.array_equal(a, c)


def test_history_matters_for_a_lively_model():
    cfg = tiny_config()
    model = lively_model(cfg)
    conv = random_conversation(cfg, 4)
    a = run_conversation(model, unit_norm(), conv, 0, steps_out=5)
    b = run_conversation(model, unit_norm(), conv, 3, steps_out=5)
    K = cfg.K_frames
    assert np.array_equal(a[:K], b[:K])  # no history exists yet for the first turn
    assert not np.array_equal(a[K:], b[K:])


def test_omega_one_equals_conditional_branch():
    cfg = tiny_config()
    model = lively_model(cfg)
    norm = NormStats(mean=np.linspace(0, 1, 56), std=np.linspace(1, 2, 56))
    streamer = Streamer(model, norm, 1)
    turns = [streamer.push_turn(*t) for t in random_conversation(cfg, 2)]
    streamer.generate_turn(turns[0], 1.0, 5, seeded_rng(0, "a"))
    got = streamer.generate_turn(turns[1], 1.0, 5, seeded_rng(0, "b"))
    # manual path that evaluates both branches and combines them at omega = 1
    with torch.no_grad():
        ctx = model.context(turns)
        pos = np.flatnonzero((ctx.turn_id == 1) & (ctx.modality_id == AGENT_HEAD))
        from timar.context import apply_cfg_drop
        z = model.fusion.encode(ctx.tokens, ctx.turn_id)[pos]
        dropped = apply_cfg_drop(ctx, model.tokens.fake)
        zu = model.fusion.encode(dropped.tokens, dropped.turn_id)[pos]
        x = sample(model.diff, model.schedule, z, ctx.frame_index[pos], 1.0, zu, 5, seeded_rng(0, "b"))
    assert np.array_equal(got, norm.denormalize(x.double().numpy()))


def test_window_never_exceeds_capacity(monkeypatch):
    cfg = tiny_config()
    model = lively_model(cfg)
    lengths = []
    original = model.fusion.encode

    def spy(tokens, turn_ids):
        lengths.append(tokens.shape[-2])
        return original(tokens, turn_ids)

    monkeypatch.setattr(model.fusion, "encode", spy)
    run_conversation(model, unit_norm(), random_conversation(cfg, 6), 2, omega=2.0, steps_out=3)
    assert max(lengths) == 3 * cfg.turn_len
    assert lengths[:4] == [cfg.turn_len, cfg.turn_len, 2 * cfg.turn_len, 2 * cfg.turn_len]


def test_overwriting_predictions_has_no_effect():
    cfg = tiny_config()
    model = lively_model(cfg)
    conv = random_conversation(cfg, 5, seed=2)
    clean = run_conversation(model, unit_norm(), conv, 3, steps_out=5, seed=1)
    streamer = Streamer(model, unit_norm(), 3)
    outs = []
    for t, turn in enumerate(conv):
        out = streamer.generate_turn(streamer.push_turn(*turn), 1.0, 5, seeded_rng(1, f"noise//{t}"))
        outs.append(out.copy())
        out[:] = 1e6  # clobber what the caller got back
    assert np.array_equal(np.concatenate(outs), clean)
    assert all(bool(t.agent_head_is_mask.all()) and torch.all(t.agent_head == model.tokens.mask) for t in streamer.buffer)


def test_snapshot_replay():
    cfg = tiny_config()
    model = lively_model(cfg)
    conv = random_conversation(cfg, 6, seed=3)
    streamer = Streamer(model, unit_norm(), 2)
    rngs = lambda t: seeded_rng(0, f"t{t}")
    full, snap = [], None
    for t, turn in enumerate(conv):
        if t == 4:
            snap = streamer.buffer.snapshot()
        full.append(streamer.generate_turn(streamer.push_turn(*turn), 1.0, 5, rngs(t)))
    replay = Streamer(model, unit_norm(), 2)
    replay.buffer = snap
    for t in (4, 5):
        assert np.array_equal(replay.generate_turn(replay.push_turn(*conv[t]), 1.0, 5, rngs(t)), full[t])
    # a fresh streamer fed only turns t-n..t reproduces turn t as well
    fresh = Streamer(model, unit_norm(), 2)
    for t in (3, 4):
        fresh.buffer.append(fresh.push_turn(*conv[t]))
    assert np.array_equal(fresh.generate_turn(fresh.push_turn(*conv[5]), 1.0, 5, rngs(5)), full[5])


def test_future_input_never_changes_past_output():
    cfg = tiny_config()
    model = lively_model(cfg)
    conv = random_conversation(cfg, 4, seed=4)
    base = run_conversation(model, unit_norm(), conv, 3, omega=2.0, steps_out=5)
    K = cfg.K_frames
    for t in range(3):
        changed = list(conv)
        S_u, S_a, H_u = changed[t + 1]
        changed[t + 1] = (S_u[::-1].copy(), S_a, H_u + 1.0)
        out = run_conversation(model, unit_norm(), changed, 3, omega=2.0, steps_out=5)
        assert np.array_equal(out[:(t + 1) * K], base[:(t + 1) * K])
        assert not np.array_equal(out[(t + 1) * K:(t + 2) * K], base[(t + 1) * K:(t + 2) * K])


def test_missing_norm_stats():
    cfg = tiny_config()
    streamer = Streamer(lively_model(cfg), None, 0)
    with pytest.raises(StreamError):
        streamer.push_turn(*random_conversation(cfg, 1)[0])
