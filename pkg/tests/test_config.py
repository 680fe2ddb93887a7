import pytest

from fedvtc.config import RunConfig, default_variants, dumps_config, load_config, load_suite, loads_config
from fedvtc.errors import ConfigError


def test_roundtrip_defaults_and_overrides():
    for cfg in (RunConfig(), RunConfig(train_cap=2000, finetune_lr=0.01, toy_data=True, tc_mode="regular")):
        assert loads_config(dumps_config(cfg)) == cfg


def test_partial_file_fills_defaults(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[run]\nschema_version = 1\nrounds = 7\n")
    cfg = load_config(path)
    assert cfg.rounds == 7 and cfg.clients == RunConfig().clients


@pytest.mark.parametrize("text", [
    "[run]\nrounds = 3\n",
    "[run]\nschema_version = 2\n",
    "[other]\nschema_version = 1\n",
    "[run]\nschema_version = 1\nbogus = 1\n",
    "[run]\nschema_version = 1\nrounds = many\n",
    "[run]\nschema_version = 1\ntoy_data = maybe\n",
    "[run]\nschema_version = 1\nparticipants = 20\n",
    "[run]\nschema_version = 1\ntc_mode = sometimes\n",
    "[run]\nschema_version = 1\nlam = -1\n",
])
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        loads_config(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.ini")


def test_default_variants():
    base = RunConfig(rounds=4)
    v = default_variants(base)
    assert list(v) == ["fedvtc-singular", "fedvtc-regular", "elbo-only", "no-finetune"]
    assert v["no-finetune"] == base.with_overrides(name="no-finetune", finetune_rounds=0)
    assert v["fedvtc-regular"].tc_mode == "regular" and v["elbo-only"].train_mode == "elbo_only"


def test_suite_file(tmp_path):
    path = tmp_path / "s.ini"
    path.write_text(
        "[run]\nschema_version = 1\nrounds = 5\n\n"
        "[suite]\nname = abl\nseeds = 4, 9, 2\n\n"
        "[variant:a]\nlam = 0.5\n\n[variant:b]\ntc_mode = regular\n"
    )
    suite = load_suite(path)
    assert suite.name == "abl" and suite.seeds == [4, 9, 2]
    assert suite.variants["a"].lam == 0.5 and suite.variants["a"].rounds == 5 and suite.variants["a"].name == "a"
    assert load_suite(path, repeats=2).seeds == [4, 9]


def test_suite_defaults(tmp_path):
    path = tmp_path / "s.ini"
    path.write_text("[run]\nschema_version = 1\nseed = 10\n")
    suite = load_suite(path)
    assert suite.seeds == [10, 11, 12]
    assert len(suite.variants) == 4
