import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sleepegan import config
from sleepegan.config import ConfigError


def write(path, text):
    path.write_text(text)
    return str(path)


def test_defaults_without_file():
    cfg = config.load(None)
    assert cfg["seed"] == 0
    assert cfg["clf.weights"] == (1.0, 1.5, 1.0, 1.0, 1.0)
    assert cfg["clf.pools"] == ((8, 8), (4, 4), (2, 2))
    assert cfg["rebalance.target_count"] is None


def test_include_layers_and_later_lines_win(tmp_path):
    (tmp_path / "sub").mkdir()
    write(tmp_path / "sub" / "base.cfg", "seed = 3\nk_folds = 5\n")
    top = write(tmp_path / "run.cfg", "k_folds = 4\ninclude = sub/base.cfg\nseed = 9  # last wins\n")
    cfg = config.load(top)
    assert cfg["seed"] == 9
    assert cfg["k_folds"] == 5
    assert len(cfg.sources) == 2


def test_overrides_beat_files(tmp_path):
    top = write(tmp_path / "a.cfg", "seed = 3\n")
    assert config.load(top, [("seed", "11")])["seed"] == 11


def test_paths_resolve_against_config_dir(tmp_path):
    top = write(tmp_path / "a.cfg", "data.store = out/e.segd\n")
    assert config.load(top).path("data.store") == str(tmp_path / "out" / "e.segd")


def test_include_cycle(tmp_path):
    write(tmp_path / "a.cfg", "include = b.cfg\n")
    write(tmp_path / "b.cfg", "include = a.cfg\n")
    with pytest.raises(ConfigError, match="cycle"):
        config.load(str(tmp_path / "a.cfg"))


def test_unknown_key_reports_location(tmp_path):
    top = write(tmp_path / "a.cfg", "seed = 1\n\nclf.learning_rate = 3\n")
    with pytest.raises(ConfigError, match=r"a\.cfg:3: unknown key"):
        config.load(top)


@pytest.mark.parametrize("line", ["seed = x", "augment.enabled = maybe", "clf.pools = 8-8",
                                  "rebalance.policy = most", "no equals sign"])
def test_bad_lines(tmp_path, line):
    with pytest.raises(ConfigError):
        config.load(write(tmp_path / "a.cfg", line + "\n"))


@pytest.mark.parametrize("pairs", [
    [("k_folds", "1")],
    [("rebalance.policy", "target_count")],
    [("clf.weights", "1, 2")],
    [("ensemble.M", "11")],
    [("gan.real_label", "0.2")],
    [("val_fraction", "1.0")],
])
def test_validation(pairs):
    with pytest.raises(ConfigError):
        config.load(None, pairs)


def test_missing_file():
    with pytest.raises(ConfigError, match="cannot read"):
        config.load("/nonexistent/run.cfg")


def test_documented_keys_cover_schema():
    lines = config.documented_keys().splitlines()
    assert [ln.split("\t")[0] for ln in lines] == list(config.SCHEMA)
    assert all(len(ln.split("\t")) == 3 and ln.split("\t")[2] for ln in lines)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), folds=st.integers(2, 30), lr=st.floats(1e-6, 1.0),
       filters=st.lists(st.integers(1, 512), min_size=5, max_size=5), enabled=st.booleans(),
       target=st.one_of(st.none(), st.integers(1, 10**6)))
def test_resolved_text_reloads_identically(tmp_path_factory, seed, folds, lr, filters, enabled, target):
    pairs = [("seed", str(seed)), ("k_folds", str(folds)), ("clf.lr", repr(lr)),
             ("clf.filters", ", ".join(map(str, filters))), ("augment.enabled", str(enabled)),
             ("rebalance.target_count", str(target))]
    cfg = config.load(None, pairs)
    path = tmp_path_factory.mktemp("cfg") / "resolved.cfg"
    path.write_text(cfg.as_text())
    again = config.load(str(path))
    assert again.values == cfg.values
