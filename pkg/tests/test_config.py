import pytest
from hypothesis import given, settings, strategies as st

from xil.config import (ConfigOverrideError, ConfigParseError, apply_override, config_hash,
                        default_config_path, dump, load_yaml, merge, parse_config)


@pytest.fixture
def tree():
    return parse_config()


def test_packaged_defaults_load(tree):
    assert tree["policy"]["backbone"] == "xlstm"
    assert tree["trainer"]["batch_size"] == 256
    assert default_config_path("toy").exists()


def test_string_override(tree):
    apply_override(tree, "policy.head=rf")
    assert tree["policy"]["head"] == "rf"


def test_numeric_overrides(tree):
    apply_override(tree, "trainer.lr=0.001")
    assert tree["trainer"]["lr"] == 0.001
    apply_override(tree, "trainer.lr=1")
    assert tree["trainer"]["lr"] == 1.0 and isinstance(tree["trainer"]["lr"], float)
    apply_override(tree, "trainer.steps=20")
    assert tree["trainer"]["steps"] == 20


def test_unknown_path_names_it(tree):
    with pytest.raises(ConfigOverrideError, match="nonexistent"):
        apply_override(tree, "nonexistent.key=1")
    with pytest.raises(ConfigOverrideError, match="policy.depth"):
        apply_override(tree, "policy.depth=3")


@pytest.mark.parametrize("item", ["trainer.steps=fast", "trainer.steps=1.5", "task.images=1",
                                  "policy.modalities=state", "trainer.lr=true", "trainer.lr=fast"])
def test_type_mismatch_rejected(tree, item):
    with pytest.raises(ConfigOverrideError, match="expected"):
        apply_override(tree, item)


def test_null_leaves_accept_values_and_lists_parse(tree):
    apply_override(tree, "policy.n_layers=3")
    apply_override(tree, "data.path=/tmp/x.xil")
    apply_override(tree, "policy.modalities=[state, image]")
    assert tree["policy"]["n_layers"] == 3 and tree["data"]["path"] == "/tmp/x.xil"
    assert tree["policy"]["modalities"] == ["state", "image"]


def test_malformed_override(tree):
    with pytest.raises(ConfigOverrideError, match="key.path=value"):
        apply_override(tree, "policy.head")
    with pytest.raises(ConfigOverrideError, match="empty"):
        apply_override(tree, "policy..head=rf")


def test_overrides_apply_in_order():
    t = parse_config(overrides=["policy.head=rf", "policy.head=ddpm"])
    assert t["policy"]["head"] == "ddpm"


def test_parse_error_reports_line_number(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("seed: 1\npolicy:\n  head: [beso\n  d_model: 3\n")
    with pytest.raises(ConfigParseError, match=r"line \d+, column \d+"):
        parse_config(p)
    with pytest.raises(ConfigParseError, match="mapping"):
        load_yaml("- a\n- b\n")
    with pytest.raises(ConfigParseError, match="cannot read"):
        parse_config(tmp_path / "missing.yaml")


def test_file_is_deep_merged_strictly(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("policy:\n  head: rf\ntrainer:\n  steps: 7\n")
    t = parse_config(p, ["trainer.steps=9"])
    assert t["policy"]["head"] == "rf" and t["policy"]["backbone"] == "xlstm"
    assert t["trainer"]["steps"] == 9
    p.write_text("policy:\n  wings: 2\n")
    with pytest.raises(ConfigOverrideError, match="policy.wings"):
        parse_config(p)


def test_merge_non_strict_adds_keys():
    assert merge({"a": {"b": 1}}, {"a": {"c": 2}}) == {"a": {"b": 1, "c": 2}}


def test_toy_config_differs_only_in_scale():
    toy = parse_config(default_config_path("toy"))
    assert toy["policy"]["d_model"] == 64 and toy["policy"]["n_layers"] == 2


def test_hash_is_stable_and_content_sensitive(tree):
    h = config_hash(tree)
    assert len(h) == 10 and h == config_hash(parse_config())
    apply_override(tree, "seed=1")
    assert config_hash(tree) != h


def test_dump_roundtrips(tree):
    assert load_yaml(dump(tree)) == tree


@settings(max_examples=40, deadline=None)
@given(st.integers(-10**6, 10**6), st.floats(1e-8, 10, allow_nan=False))
def test_numeric_override_property(steps, lr):
    t = parse_config(overrides=[f"trainer.steps={steps}", f"trainer.lr={lr!r}"])
    assert t["trainer"]["steps"] == steps and t["trainer"]["lr"] == pytest.approx(lr)
