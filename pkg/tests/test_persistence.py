import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dgcnflow.nnmodels import KINDS, toy_instance
from dgcnflow.persistence import (
    ArtifactError,
    ArtifactShapeError,
    ArtifactVersionError,
    CorruptArtifactError,
    MissingArtifactError,
    ModelArtifact,
    TruncatedArtifactError,
    check_nodes,
    dumps,
    fingerprint,
    load_model,
    save_model,
)


def same_params(a, b):
    ta, tb = a.named_tensors(), b.named_tensors()
    assert list(ta) == list(tb)
    return all(np.array_equal(ta[k].data, tb[k].data) for k in ta)


@pytest.mark.parametrize("kind", KINDS)
def test_round_trip_is_bit_exact(tmp_path, kind):
    model, inputs = toy_instance(kind, seed=3)
    prov = {"seed": 3, "note": "x"}
    path = save_model(ModelArtifact(model, prov), tmp_path / "m.json")
    back = load_model(path)
    assert back.provenance == prov
    assert back.model.spec == model.spec
    assert same_params(model, back.model)
    out = model.forward(inputs["x"], inputs["adj"], inputs["xd"]).data
    again = back.model.forward(inputs["x"], inputs["adj"], inputs["xd"]).data
    assert np.array_equal(out, again)


@pytest.mark.parametrize("kind", KINDS)
def test_save_load_save_is_byte_identical(tmp_path, kind):
    model, _ = toy_instance(kind, seed=1)
    first = save_model(ModelArtifact(model, {"a": 1}), tmp_path / "a.json").read_bytes()
    second = save_model(load_model(tmp_path / "a.json"), tmp_path / "b.json").read_bytes()
    assert first == second


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(allow_nan=False, allow_infinity=False, width=64)))
def test_arbitrary_floats_survive(tmp_path_factory, values):
    model, _ = toy_instance("lstm", seed=0)
    t = model.params.head_b
    t.data[:] = np.resize(values, t.shape)
    path = save_model(ModelArtifact(model), tmp_path_factory.mktemp("f") / "m.json")
    back = load_model(path).model.params.head_b.data
    assert np.array_equal(back.view(np.int64), t.data.view(np.int64))


def test_transfer_artifact_nests_pretrained(tmp_path):
    model, _ = toy_instance("transfer", seed=2)
    body = json.loads(dumps(ModelArtifact(model)))
    assert body["pretrained"]["spec"]["kind"] == "dgcnlstm"
    assert body["frozen"] is True
    back = load_model(save_model(ModelArtifact(model), tmp_path / "t.json")).model
    assert same_params(model.params.pretrained, back.params.pretrained)
    assert back.frozen
    assert not any(t.requires_grad for t in back.params.pretrained.params.tensors())


def test_unfrozen_flag_survives(tmp_path):
    model, _ = toy_instance("transfer", seed=2)
    model.set_frozen(False)
    back = load_model(save_model(ModelArtifact(model), tmp_path / "t.json")).model
    assert not back.frozen


def test_flipped_digit_is_corruption(tmp_path):
    model, _ = toy_instance("dgcnlstm", seed=0)
    path = save_model(ModelArtifact(model), tmp_path / "m.json")
    text = path.read_text()
    k = text.index('"data": [') + len('"data": [') + 3
    while not text[k].isdigit():
        k += 1
    digit = "1" if text[k] != "1" else "2"
    path.write_text(text[:k] + digit + text[k + 1 :])
    with pytest.raises(CorruptArtifactError):
        load_model(path)


def test_truncated_file(tmp_path):
    model, _ = toy_instance("lstm", seed=0)
    path = save_model(ModelArtifact(model), tmp_path / "m.json")
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(TruncatedArtifactError):
        load_model(path)


def test_malformed_middle_is_corruption(tmp_path):
    model, _ = toy_instance("lstm", seed=0)
    path = save_model(ModelArtifact(model), tmp_path / "m.json")
    text = path.read_text()
    path.write_text(text.replace('"params"', '"params" ::', 1))
    with pytest.raises(CorruptArtifactError):
        load_model(path)


def test_version_mismatch(tmp_path):
    model, _ = toy_instance("lstm", seed=0)
    body = json.loads(dumps(ModelArtifact(model)))
    body["format_version"] = 99
    (tmp_path / "m.json").write_text(json.dumps(body))
    with pytest.raises(ArtifactVersionError):
        load_model(tmp_path / "m.json")


def test_missing_file(tmp_path):
    with pytest.raises(MissingArtifactError):
        load_model(tmp_path / "nope.json")
    assert issubclass(MissingArtifactError, FileNotFoundError)


def test_error_classes_are_distinct():
    classes = {ArtifactVersionError, TruncatedArtifactError, CorruptArtifactError, ArtifactShapeError}
    assert len(classes) == 4
    for c in classes:
        assert issubclass(c, ArtifactError)
        assert not any(issubclass(c, o) for o in classes - {c})


def test_node_count_mismatch():
    model, _ = toy_instance("dgcnlstm", seed=0, n_nodes=5)
    check_nodes(model, 5)
    with pytest.raises(ArtifactShapeError):
        check_nodes(model, 6)


def test_fingerprint_tracks_content_and_shape():
    a = np.arange(6.0)
    assert fingerprint(a) == fingerprint(a.copy())
    assert fingerprint(a) != fingerprint(a.reshape(2, 3))
    b = a.copy()
    b[3] = np.nextafter(b[3], 10)
    assert fingerprint(a) != fingerprint(b)
