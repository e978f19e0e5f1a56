import pytest
from hypothesis import given, settings, strategies as st

from timar.config import COMPONENTS, HEAD_DIM, ConfigError, ModelConfig, dump_config, load_config, parse_config


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "empty.cfg"
    path.write_text("")
    cfg = load_config(path)
    assert cfg == ModelConfig()
    assert (cfg.d_t, cfg.d_e, cfg.encoder_layers, cfg.encoder_heads) == (1024, 1024, 16, 16)
    assert (cfg.d_m, cfg.K_blocks, cfg.f_s, cfg.f_h, cfg.f_w, cfg.d_raw) == (1024, 3, 16000, 25, 50, 512)
    assert (cfg.c, cfg.N_max, cfg.r, cfg.p_cfg) == (1.0, 8, 0.7, 0.1)
    assert (cfg.diff_train_steps, cfg.diff_sample_steps, cfg.omega) == (1000, 100, 1.0)


def test_training_defaults():
    cfg = ModelConfig()
    assert (cfg.batch_size, cfg.epochs, cfg.warmup_steps, cfg.lr) == (32, 400, 100, 1e-4)


def test_component_split():
    assert HEAD_DIM == 56
    sizes = [s.stop - s.start for s in COMPONENTS.values()]
    assert sizes == [50, 3, 3]


def test_derived_sizes():
    cfg = parse_config("c=1\nf_h=25\n")
    assert cfg.K_frames == 25
    assert cfg.turn_len == 110
    assert cfg.max_len == 880
    assert cfg.raw_rows == 49


def test_out_of_range_r_names_key():
    with pytest.raises(ConfigError) as info:
        parse_config("r=1.5")
    assert info.value.key == "r"


@pytest.mark.parametrize("text,key", [
    ("p_cfg=1", "p_cfg"),
    ("diff_sample_steps=2000", "diff_sample_steps"),
    ("d_h=57", "d_h"),
    ("c=0.5\nf_h=25", "c"),
    ("r=0", "r"),
])
def test_invariant_violations(text, key):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.key == key


def test_parse_error_has_line_number():
    with pytest.raises(ConfigError) as info:
        parse_config("# header\nd_t=64\nthis is not a pair\n")
    assert info.value.line == 3
    with pytest.raises(ConfigError) as info:
        parse_config("d_t=abc")
    assert info.value.line == 1 and info.value.key == "d_t"


def test_unknown_and_duplicate_keys():
    with pytest.raises(ConfigError):
        parse_config("nonsense=1")
    with pytest.raises(ConfigError) as info:
        parse_config("d_t=8\nd_t=8")
    assert info.value.line == 2


def test_comments_and_whitespace():
    cfg = parse_config("  d_t = 64   # token dim\n\n# full comment\nencoder_heads=4\nd_e=64\n")
    assert cfg.d_t == 64 and cfg.encoder_heads == 4


@settings(max_examples=50, deadline=None)
@given(
    d=st.sampled_from([8, 16, 64]),
    heads=st.sampled_from([1, 2, 4]),
    r=st.floats(0.01, 1.0),
    p=st.floats(0.0, 0.99),
    f_h=st.integers(1, 60),
    steps=st.integers(1, 50),
    precision=st.sampled_from(["f32", "f64"]),
)
def test_roundtrip(tmp_path_factory, d, heads, r, p, f_h, steps, precision):
    cfg = ModelConfig(d_t=d, d_e=d, encoder_heads=heads, r=r, p_cfg=p, f_h=f_h,
                      diff_sample_steps=steps, precision=precision)
    path = tmp_path_factory.mktemp("cfg") / "model.cfg"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg
