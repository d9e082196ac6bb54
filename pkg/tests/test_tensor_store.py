import json
import struct

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stfmerge.errors import ConfigError, DtypeError, FormatError, SchemaError, ShapeError, StoreIOError
from stfmerge.tensor_store import (
    CheckpointSet,
    LoraTaskStore,
    MemoryStore,
    ParamRole,
    RoleRules,
    TensorRecord,
    classify,
    materialize_lora_delta,
    open_checkpoint,
    write_checkpoint,
)


def raw_file(path, header: bytes, payload: bytes = b""):
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)) + header + payload)


def test_open_lists_sorted_names(tmp_path):
    p = tmp_path / "a.safetensors"
    write_checkpoint(p, [TensorRecord.from_array("w", np.eye(2)), TensorRecord.from_array("b", np.ones(2))])
    with open_checkpoint(p) as store:
        assert store.names() == ["b", "w"]
        assert store.shape("w") == (2, 2)
        assert store.dtype("b") == "F32"


def test_f16_promoted_exactly(tmp_path):
    p = tmp_path / "h.safetensors"
    vals = np.array([0.1, -3.5, 65504.0, 6e-8], dtype=np.float16)
    write_checkpoint(p, [TensorRecord("h", (4,), "F16", vals)])
    with open_checkpoint(p) as store:
        out = store.read("h")
        assert out.dtype == np.float32
        assert (out == vals.astype(np.float32)).all()
        assert (store.read_raw("h").data.view(np.uint16) == vals.view(np.uint16)).all()


def test_bf16_promoted(tmp_path):
    p = tmp_path / "bf.safetensors"
    bits = np.array([0x3F80, 0xC000, 0x0000], dtype=np.uint16)  # 1, -2, 0
    write_checkpoint(p, [TensorRecord("x", (3,), "BF16", bits)])
    with open_checkpoint(p) as store:
        assert store.read("x").tolist() == [1.0, -2.0, 0.0]


def test_truncated_file(tmp_path):
    p = tmp_path / "t.safetensors"
    write_checkpoint(p, [TensorRecord.from_array("w", np.ones((4, 4)))])
    data = p.read_bytes()
    p.write_bytes(data[:-5])
    with pytest.raises(FormatError):
        open_checkpoint(p)
    p.write_bytes(data[:5])
    with pytest.raises(FormatError):
        open_checkpoint(p)


def test_malformed_headers(tmp_path):
    p = tmp_path / "m.safetensors"
    raw_file(p, b"not json")
    with pytest.raises(FormatError):
        open_checkpoint(p)
    raw_file(p, b"[1, 2]")
    with pytest.raises(FormatError):
        open_checkpoint(p)
    raw_file(p, json.dumps({"w": {"dtype": "F32", "shape": [2], "data_offsets": [0, 4]}}).encode(), b"\0" * 8)
    with pytest.raises(FormatError):
        open_checkpoint(p)
    overlapping = {
        "a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
        "b": {"dtype": "F32", "shape": [2], "data_offsets": [4, 12]},
    }
    raw_file(p, json.dumps(overlapping).encode(), b"\0" * 12)
    with pytest.raises(FormatError):
        open_checkpoint(p)


def test_duplicate_names_in_header(tmp_path):
    p = tmp_path / "d.safetensors"
    entry = '{"dtype": "F32", "shape": [1], "data_offsets": [0, 4]}'
    raw_file(p, f'{{"w": {entry}, "w": {entry}}}'.encode(), b"\0" * 4)
    with pytest.raises(FormatError, match="duplicate"):
        open_checkpoint(p)


def test_unsupported_dtype(tmp_path):
    p = tmp_path / "i.safetensors"
    raw_file(p, json.dumps({"ids": {"dtype": "I64", "shape": [1], "data_offsets": [0, 8]}}).encode(), b"\0" * 8)
    with pytest.raises(DtypeError):
        open_checkpoint(p)


def test_missing_file(tmp_path):
    with pytest.raises(StoreIOError):
        open_checkpoint(tmp_path / "nope.safetensors")


def test_empty_checkpoint(tmp_path):
    p = tmp_path / "e.safetensors"
    write_checkpoint(p, [])
    with open_checkpoint(p) as store:
        assert store.names() == []
    (hlen,) = struct.unpack("<Q", p.read_bytes()[:8])
    assert p.read_bytes()[8:8 + hlen].strip() == b"{}"


def test_name_collision_writes_nothing(tmp_path):
    p = tmp_path / "c.safetensors"
    recs = [TensorRecord.from_array("w", np.ones(2)), TensorRecord.from_array("w", np.zeros(2))]
    with pytest.raises(FormatError):
        write_checkpoint(p, recs)
    assert not p.exists()
    assert list(tmp_path.iterdir()) == []


def test_record_invariants():
    with pytest.raises(FormatError):
        TensorRecord("", (1,), "F32", np.zeros(1, np.float32))
    with pytest.raises(ShapeError):
        TensorRecord("x", (3,), "F32", np.zeros(2, np.float32))
    with pytest.raises(DtypeError):
        TensorRecord("x", (1,), "I8", np.zeros(1, np.int8))


def test_write_to_missing_directory(tmp_path):
    with pytest.raises(StoreIOError):
        write_checkpoint(tmp_path / "no" / "dir.safetensors", [])


finite_f32 = arrays(
    np.float32,
    st.tuples(st.integers(0, 4), st.integers(1, 5)),
    elements=st.floats(width=32),
)


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.lists(finite_f32, min_size=0, max_size=6))
def test_round_trip_bitwise(tmp_path, tensors):
    records = [TensorRecord.from_array(f"t{i}", a) for i, a in enumerate(tensors)]
    records.append(TensorRecord("half", (3,), "F16", np.array([1, np.nan, -0.0], dtype=np.float16)))
    records.append(TensorRecord("brain", (2,), "BF16", np.array([0x7FC1, 0x8001], dtype=np.uint16)))
    p = tmp_path / "rt.safetensors"
    write_checkpoint(p, records)
    with open_checkpoint(p) as store:
        for rec in records:
            back = store.read_raw(rec.name)
            assert back.dtype == rec.dtype and back.shape == rec.shape
            assert back.data.tobytes() == np.ascontiguousarray(rec.data).tobytes()


def test_interop_with_reference_library(tmp_path):
    safetensors_numpy = pytest.importorskip("safetensors.numpy")
    ours = tmp_path / "ours.safetensors"
    arrays_in = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([0.5], dtype=np.float16)}
    write_checkpoint(ours, [TensorRecord.from_array("a", arrays_in["a"]), TensorRecord("b", (1,), "F16", arrays_in["b"])])
    loaded = safetensors_numpy.load_file(str(ours))
    assert (loaded["a"] == arrays_in["a"]).all() and loaded["b"].dtype == np.float16

    theirs = tmp_path / "theirs.safetensors"
    safetensors_numpy.save_file(arrays_in, str(theirs), metadata={"format": "np"})
    with open_checkpoint(theirs) as store:
        assert store.metadata == {"format": "np"}
        assert (store.read("a") == arrays_in["a"]).all()
        assert store.read_raw("b").data.tobytes() == arrays_in["b"].tobytes()


def test_concurrent_reads(tmp_path):
    from concurrent.futures import ThreadPoolExecutor

    p = tmp_path / "many.safetensors"
    recs = [TensorRecord.from_array(f"t{i:03d}", np.full((8, 8), i, dtype=np.float32)) for i in range(64)]
    write_checkpoint(p, recs)
    with open_checkpoint(p) as store, ThreadPoolExecutor(8) as pool:
        outs = list(pool.map(store.read, store.names()))
    assert all((o == i).all() for i, o in enumerate(outs))


# -- classification -----------------------------------------------------------


def _shapes_store(shapes):
    return MemoryStore.from_arrays({k: np.zeros(v) for k, v in shapes.items()})


def test_classify_examples():
    store = _shapes_store({
        "encoder.block.0.ffn.wi.weight": (6, 3),
        "encoder.block.0.layer_norm.weight": (3,),
        "shared.weight": (10, 3),
        "encoder.block.0.ffn.wi.bias": (6,),
        "h.0.attn.bias": (1, 1, 4, 4),
        "h.0.attn.c_attn.bias": (9,),
        "h.0.ln_1.bias": (3,),
        "conv.kernel": (2, 2, 2),
    })
    roles = classify(store)
    assert roles == {
        "encoder.block.0.ffn.wi.weight": ParamRole.LINEAR,
        "encoder.block.0.layer_norm.weight": ParamRole.NORMALIZATION,
        "shared.weight": ParamRole.EMBEDDING,
        "encoder.block.0.ffn.wi.bias": ParamRole.BIAS,
        "h.0.attn.bias": ParamRole.IGNORE,
        "h.0.attn.c_attn.bias": ParamRole.BIAS,
        "h.0.ln_1.bias": ParamRole.NORMALIZATION,
        "conv.kernel": ParamRole.BIAS,
    }


def test_first_match_wins():
    store = _shapes_store({"shared.weight": (4, 4), "enc.layer_norm.weight": (4,)})
    rules = RoleRules(patterns=[("shared*", ParamRole.EMBEDDING), ("*", ParamRole.LINEAR)])
    with pytest.raises(ConfigError):  # LINEAR assigned to a 1-D tensor
        classify(store, rules)
    rules = RoleRules(patterns=[("*layer_norm*", ParamRole.NORMALIZATION), ("shared*", ParamRole.EMBEDDING)])
    assert classify(store, rules) == {"shared.weight": ParamRole.EMBEDDING, "enc.layer_norm.weight": ParamRole.NORMALIZATION}


def test_regex_rules_and_invalid_pattern():
    store = _shapes_store({"a.w": (2, 2), "b.w": (2, 2)})
    rules = RoleRules(patterns=[(r"re:^a\.", ParamRole.IGNORE)], default_2d=ParamRole.EMBEDDING)
    assert classify(store, rules) == {"a.w": ParamRole.IGNORE, "b.w": ParamRole.EMBEDDING}
    with pytest.raises(ConfigError):
        classify(store, RoleRules(patterns=[("re:(", ParamRole.IGNORE)]))


def test_classify_deterministic_and_total(rng):
    names = {f"m{i}.{s}": tuple(rng.integers(1, 4, size=rng.integers(0, 4))) for i in range(30) for s in ("weight", "bias")}
    store = _shapes_store(names)
    a, b = classify(store), classify(store)
    assert a == b and set(a) == set(names)


def test_role_parse():
    assert ParamRole.parse("LinearMatrix") is ParamRole.LINEAR
    with pytest.raises(ConfigError):
        ParamRole.parse("conv")


# -- LoRA ---------------------------------------------------------------------


def test_lora_delta_examples():
    out = materialize_lora_delta(np.array([[2.0, 3.0]]), np.array([[1.0], [0.0]]), 1.0)
    assert out.tolist() == [[2.0, 3.0], [0.0, 0.0]]
    assert (materialize_lora_delta(np.ones((1, 3)), np.ones((2, 1)), 0.0) == np.zeros((2, 3))).all()
    assert (materialize_lora_delta(np.eye(2), np.eye(2), 0.5) == 0.5 * np.eye(2)).all()
    with pytest.raises(ShapeError):
        materialize_lora_delta(np.ones((2, 3)), np.ones((2, 1)), 1.0)


def test_lora_task_store():
    base = MemoryStore.from_arrays({"q.weight": np.zeros((2, 3)), "q.bias": np.ones(2)})
    adapter = MemoryStore.from_arrays({
        "base_model.model.q.lora_A.weight": np.array([[2.0, 3.0, 0.0]]),
        "base_model.model.q.lora_B.weight": np.array([[1.0], [0.0]]),
    })
    view = LoraTaskStore(base, adapter, lora_scale=2.0)
    assert view.read("q.weight").tolist() == [[4, 6, 0], [0, 0, 0]]
    assert view.read("q.bias").tolist() == [1, 1]
    with pytest.raises(SchemaError):
        LoraTaskStore(base, MemoryStore.from_arrays({"x.lora_A.weight": np.ones((1, 1))}))


# -- checkpoint sets ----------------------------------------------------------


def test_checkpoint_set_validation():
    base = MemoryStore.from_arrays({"w": np.zeros((2, 2)), "h.0.attn.bias": np.zeros((2, 2))})
    ok = MemoryStore.from_arrays({"w": np.ones((2, 2))})
    missing = MemoryStore.from_arrays({"v": np.ones((2, 2))})
    wrong = MemoryStore.from_arrays({"w": np.ones((2, 3))})
    roles = classify(base)
    CheckpointSet(base, [ok]).validate(roles)  # ignored tensor may be absent
    with pytest.raises(SchemaError, match="w"):
        CheckpointSet(base, [ok, missing]).validate(roles)
    with pytest.raises(ShapeError):
        CheckpointSet(base, [wrong]).validate(roles)
    with pytest.raises(ConfigError):
        CheckpointSet(base, [])
