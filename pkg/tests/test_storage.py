import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from xil.architectures import ModelConfig, build_model
from xil.storage import (MAGIC, CorruptFileError, IncompatibleCheckpointError, content_hash,
                         load_checkpoint, load_dataset, read_container, save_checkpoint,
                         save_dataset, write_container)
from xil.tasks import gen_bimodal_reach_dataset
from xil.trainer import Adam

TINY = ModelConfig(d_model=8, n_heads=2, n_layers=1, action_horizon=3)


def test_content_hash_matches_git_blob_hash():
    # `printf hello | git hash-object --stdin`
    assert content_hash(b"hello") == "b6fc4c620b67d95f953a5c1c1230aaab5db5a1b0"


def test_dataset_roundtrip_is_bitwise(tmp_path):
    ds = gen_bimodal_reach_dataset(5, 0, history=2)
    save_dataset(ds, tmp_path / "d.xil")
    back = load_dataset(tmp_path / "d.xil")
    assert back.meta == ds.meta
    for k, v in ds.arrays.items():
        assert back.arrays[k].dtype == np.float32 and np.array_equal(back.arrays[k], v)
    wide = load_dataset(tmp_path / "d.xil", dtype=np.float64)
    assert wide.arrays["state"].dtype == np.float64


def test_same_seed_gives_identical_files(tmp_path):
    for name in "ab":
        save_dataset(gen_bimodal_reach_dataset(6, 4), tmp_path / name)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_truncated_file_is_corrupt(tmp_path):
    p = tmp_path / "d.xil"
    save_dataset(gen_bimodal_reach_dataset(3, 0), p)
    data = p.read_bytes()
    for cut in (0, 5, len(MAGIC) + 3, len(data) // 2, len(data) - 1):
        p.write_bytes(data[:cut])
        with pytest.raises(CorruptFileError):
            load_dataset(p)


def test_kind_mismatch_and_missing_keys(tmp_path):
    write_container(tmp_path / "x", {"a": np.zeros(3)}, {}, "other")
    with pytest.raises(CorruptFileError, match="expected a dataset"):
        load_dataset(tmp_path / "x")
    write_container(tmp_path / "y", {"a": np.zeros(3)}, {}, "dataset")
    with pytest.raises(CorruptFileError, match="actions"):
        load_dataset(tmp_path / "y")


def test_unsupported_dtype_rejected(tmp_path):
    with pytest.raises(TypeError):
        write_container(tmp_path / "z", {"a": np.zeros(2, dtype=np.complex64)}, {}, "x")


def test_container_preserves_dtypes_and_shapes(tmp_path):
    arrays = {"f": np.arange(6, dtype=np.float64).reshape(2, 3), "i": np.arange(4),
              "e": np.zeros((0, 5), dtype=np.float32)}
    write_container(tmp_path / "c", arrays, {"k": [1, "x"]}, "blob")
    meta, back = read_container(tmp_path / "c", "blob")
    assert meta == {"k": [1, "x"]}
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype and np.array_equal(back[k], v)


@pytest.fixture(scope="module")
def sample_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("fuzz") / "d.xil"
    save_dataset(gen_bimodal_reach_dataset(2, 0), p)
    return p.read_bytes()


@settings(max_examples=150, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.data())
def test_random_corruption_always_raises(sample_file, tmp_path, data):
    buf = bytearray(sample_file)
    n = data.draw(st.integers(1, 8))
    for _ in range(n):
        i = data.draw(st.integers(0, len(buf) - 1))
        buf[i] = (buf[i] + data.draw(st.integers(1, 255))) % 256
    p = tmp_path / "bad.xil"
    p.write_bytes(bytes(buf))
    with pytest.raises(CorruptFileError):
        load_dataset(p)


@settings(max_examples=50, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.binary(max_size=300))
def test_arbitrary_bytes_never_crash(tmp_path, junk):
    p = tmp_path / "junk.xil"
    p.write_bytes(MAGIC + junk)
    with pytest.raises(CorruptFileError):
        read_container(p)


def test_checkpoint_roundtrip_bitwise(tmp_path, rng):
    model = build_model(TINY, 0)
    opt = Adam(model.named_parameters(), lr=1e-3)
    grads = {p: rng.normal(size=p.shape) for p in model.parameters()}
    opt.step(grads)
    save_checkpoint(model, opt, tmp_path / "m.ckpt", {"step": 1})
    ck = load_checkpoint(tmp_path / "m.ckpt", expected=TINY)
    assert ck.config == TINY and ck.meta == {"step": 1}
    rebuilt = ck.build().state_dict()
    for k, v in model.state_dict().items():
        assert np.array_equal(rebuilt[k], v)
    assert ck.optimizer["step"] == 1
    for k, v in opt.state_dict()["m"].items():
        assert np.array_equal(ck.optimizer["m"][k], v)


def test_checkpoint_mismatch_names_the_field(tmp_path):
    save_checkpoint(build_model(TINY, 0), None, tmp_path / "m.ckpt")
    other = ModelConfig(**{**TINY.to_dict(), "backbone": "mamba"})
    with pytest.raises(IncompatibleCheckpointError) as e:
        load_checkpoint(tmp_path / "m.ckpt", expected=other)
    assert e.value.field == "backbone" and "mamba" in str(e.value)
    with pytest.raises(CorruptFileError, match="expected a checkpoint"):
        save_dataset(gen_bimodal_reach_dataset(2, 0), tmp_path / "d.xil")
        load_checkpoint(tmp_path / "d.xil")


def test_state_dict_into_wrong_architecture_fails(tmp_path):
    save_checkpoint(build_model(TINY, 0), None, tmp_path / "m.ckpt")
    ck = load_checkpoint(tmp_path / "m.ckpt")
    wrong = build_model(ModelConfig(**{**TINY.to_dict(), "architecture": "encoder-decoder"}), 0)
    with pytest.raises((KeyError, ValueError)):
        wrong.load_state_dict(ck.params)
