import pytest

from pseudoasr.config import ConfigError, build_config, dump_config, load_config, read_config_text


def test_defaults():
    cfg = load_config()
    assert cfg.train.regime == "paired_only" and cfg.train.text_ratio == 0.0
    assert cfg.decode.beam == 4
    assert (cfg.train.w_ce, cfg.train.w_ctc, cfg.train.w_ictc, cfg.train.w_dur, cfg.train.w_mm) == (1, 1, 0.3, 0.1, 1)


def test_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("[train]\nregime = pseudo_direct\ntext_ratio = 3.75\n\n[data]\nframe_range = 6,12\n")
    cfg = load_config(path, ["train.text_ratio=1.5", "model.self_conditioning=true"])
    assert cfg.train.text_ratio == 1.5
    assert cfg.train.text_batch_tokens == 1.5 * cfg.train.paired_batch_tokens
    assert cfg.data.frame_range == (6, 12)
    assert cfg.model.self_conditioning is True


def test_dump_round_trip():
    cfg = load_config(None, ["train.regime=pseudo_modality_matching", "train.text_ratio=3.75",
                             "pseudo.duration_model=trained"])
    assert build_config(read_config_text(dump_config(cfg))) == cfg


@pytest.mark.parametrize("override, fragment", [
    ("train.learning_rate=1", "train.learning_rate"),
    ("optim.lr=1", "optim"),
    ("train.steps=many", "train.steps"),
    ("model.downsampling=maybe", "model.downsampling"),
    ("steps=3", "section.key=value"),
    ("train.regime=pseudo_direct", "text_ratio"),
    ("train.w_ce=-1", "w_ce"),
    ("decode.ctc_head=middle", "ctc_head"),
])
def test_bad_overrides(override, fragment):
    with pytest.raises(ConfigError, match=fragment):
        load_config(None, [override])


def test_bad_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")
    bad = tmp_path / "bad.cfg"
    bad.write_text("key = value\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    bad.write_text("[mystery]\nkey = 1\n")
    with pytest.raises(ConfigError, match="mystery"):
        load_config(bad)
