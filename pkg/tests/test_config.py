import pytest

from sceneforge.config import PRESETS, RunConfig, dump_config, load_config, parse_config_text, resolve_config
from sceneforge.numerics import ConfigError


def test_defaults():
    cfg = RunConfig()
    w = cfg.weights
    assert (w.beta_t, w.beta_nt, w.beta_distill, w.beta_level_1, w.beta_level_2) == (1.0,) * 5
    assert cfg.model.n_frames == 12 and cfg.model.keep_prob == 0.5 and cfg.train.patience == 5
    assert cfg.model.resolved().init_std == pytest.approx(64**-0.5)


def test_parse_and_round_trip(tmp_path):
    cfg = parse_config_text("# comment\nd_emb = 32\nlr=1e-4\ndeterministic=yes\nbeta_nt=0\n")
    assert cfg.model.d_emb == 32 and cfg.train.lr == 1e-4 and cfg.train.deterministic and cfg.weights.beta_nt == 0.0
    (tmp_path / "c.cfg").write_text(dump_config(cfg))
    assert load_config(tmp_path / "c.cfg") == cfg


def test_aliases_map_to_level_weights():
    cfg = parse_config_text("beta_distill_1=0.25\nbeta_distill_2=2\n")
    assert (cfg.weights.beta_level_1, cfg.weights.beta_level_2) == (0.25, 2.0)


@pytest.mark.parametrize(
    "text",
    ["nonsense_key=1", "d_emb=abc", "deterministic=maybe", "just words", "lr=-1", "batch_size=0", "beta_t=-0.5", "precision=float16"],
)
def test_bad_config_rejected(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_model_validation():
    m = RunConfig().model
    with pytest.raises(ConfigError):
        m.validate()  # feature widths unset
    m.d2d = m.d3d = m.dtext = m.dregion = 4
    m.validate()
    m.n_heads = 5
    with pytest.raises(ConfigError):
        m.validate()


def test_presets_resolve():
    for name in PRESETS:
        resolve_config(name).validate()
    assert resolve_config("small").model.d_emb == 16
    assert resolve_config(None) == RunConfig()
