"""Run-configuration parsing, include merging, and typed accessors."""

from __future__ import annotations

import pytest

from trajflow.runconfig import ConfigError, read_config


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_basic_sections_and_types(tmp_path):
    cfg = read_config(write(tmp_path / "a.cfg", """
[train]
iters = 100
lr = 3e-4
mode = end-to-end
resume = false
t_set = 2, 4, 8
"""))
    assert cfg.get_int("train", "iters") == 100
    assert cfg.get_float("train", "lr") == pytest.approx(3e-4)
    assert cfg.get("train", "mode") == "end-to-end"
    assert cfg.get_bool("train", "resume") is False
    assert cfg.get_int_list("train", "t_set") == (2, 4, 8)


def test_defaults_and_missing_keys(tmp_path):
    cfg = read_config(write(tmp_path / "a.cfg", "[train]\niters = 5\n"))
    assert cfg.get_int("train", "absent", 7) == 7
    assert cfg.get("nosection", "x") is None
    with pytest.raises(ConfigError, match=r"\[train\] lr"):
        cfg.get_float("train", "lr")
    with pytest.raises(ConfigError, match=r"\[data\] name"):
        cfg.require("data", "name")


def test_bad_values_raise_config_error(tmp_path):
    cfg = read_config(write(tmp_path / "a.cfg", "[train]\niters = soon\nflag = maybe\n"))
    with pytest.raises(ConfigError, match="iters"):
        cfg.get_int("train", "iters")
    with pytest.raises(ConfigError, match="flag"):
        cfg.get_bool("train", "flag")


def test_keys_are_case_sensitive(tmp_path):
    cfg = read_config(write(tmp_path / "a.cfg", "[train]\nLR = 1\nlr = 2\n"))
    assert cfg.get("train", "LR") == "1"
    assert cfg.get("train", "lr") == "2"


def test_include_merges_with_local_override(tmp_path):
    write(tmp_path / "base.cfg", """
[model]
width = 64
blocks = 4

[train]
iters = 1000
""")
    cfg = read_config(write(tmp_path / "run.cfg", """
[include]
base = base.cfg

[train]
iters = 50

[data]
name = two_moons
"""))
    # Included values visible, local values win.
    assert cfg.get_int("model", "width") == 64
    assert cfg.get_int("train", "iters") == 50
    assert cfg.get("data", "name") == "two_moons"


def test_nested_include_chain(tmp_path):
    write(tmp_path / "inner.cfg", "[model]\nwidth = 8\ndepth = 2\n")
    write(tmp_path / "mid.cfg", "[include]\na = inner.cfg\n[model]\nwidth = 16\n")
    cfg = read_config(write(tmp_path / "outer.cfg", "[include]\na = mid.cfg\n"))
    assert cfg.get_int("model", "width") == 16
    assert cfg.get_int("model", "depth") == 2


def test_missing_include_target(tmp_path):
    path = write(tmp_path / "a.cfg", "[include]\nx = nowhere.cfg\n")
    with pytest.raises(ConfigError, match="nowhere.cfg"):
        read_config(path)


def test_include_cycle_is_bounded(tmp_path):
    write(tmp_path / "a.cfg", "[include]\nx = b.cfg\n")
    write(tmp_path / "b.cfg", "[include]\nx = a.cfg\n")
    with pytest.raises(ConfigError, match="depth"):
        read_config(tmp_path / "a.cfg")


def test_syntax_error_reports_line(tmp_path):
    path = write(tmp_path / "bad.cfg", "[train]\nthis line has no equals sign\n")
    with pytest.raises(ConfigError, match="line"):
        read_config(path)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        read_config(tmp_path / "absent.cfg")


def test_snapshot_is_canonical(tmp_path):
    cfg1 = read_config(write(tmp_path / "a.cfg", "[b]\nk = 1\n[a]\nz = 2\ny = 3\n"))
    cfg2 = read_config(write(tmp_path / "b.cfg", "[a]\ny = 3\nz = 2\n[b]\nk = 1\n"))
    assert cfg1.snapshot() == cfg2.snapshot()
    assert "[a]" in cfg1.snapshot()
