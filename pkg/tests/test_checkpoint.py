import json

import pytest

from codestream import build_linear_schedule, init_model, load_checkpoint, save_checkpoint
from codestream.checkpoint import CheckpointFormatError, CheckpointShapeError, CheckpointVersionError
from codestream.model import LAYERS


@pytest.fixture
def saved(tmp_path):
    model = init_model(16, 6, seed=3, activation='tanh', frequency_base=500.0)
    sched = build_linear_schedule(40, 2e-4, 0.05)
    path = tmp_path / "model.json"
    save_checkpoint(model, sched, path)
    return model, sched, path


def _rewrite(path, edit):
    doc = json.loads(path.read_text())
    edit(doc)
    path.write_text(json.dumps(doc))


def test_round_trip_is_bit_exact(saved):
    model, sched, path = saved
    loaded, loaded_sched = load_checkpoint(path)
    for name in LAYERS:
        assert loaded.params[name].tobytes() == model.params[name].tobytes()
    assert (loaded.activation, loaded.frequency_base) == ('tanh', 500.0)
    assert (loaded_sched.T, loaded_sched.beta_start, loaded_sched.beta_end) == (40, 2e-4, 0.05)
    assert loaded_sched.alpha_bar.tobytes() == sched.alpha_bar.tobytes()


def test_wrong_version(saved):
    _, _, path = saved
    _rewrite(path, lambda doc: doc.update(version=99))
    with pytest.raises(CheckpointVersionError, match="99"):
        load_checkpoint(path)


def test_truncated_array_names_layer(saved):
    _, _, path = saved
    _rewrite(path, lambda doc: doc["parameters"]["W2"].update(data=doc["parameters"]["W2"]["data"][:-5]))
    with pytest.raises(CheckpointShapeError, match="W2") as info:
        load_checkpoint(path)
    assert info.value.layer == "W2"


def test_declared_shape_must_match_dims(saved):
    _, _, path = saved
    _rewrite(path, lambda doc: doc["model"].update(hidden_width=8))
    with pytest.raises(CheckpointShapeError, match="W1"):
        load_checkpoint(path)


def test_malformed_files(saved, tmp_path):
    _, _, path = saved
    garbage = tmp_path / "garbage.json"
    garbage.write_text("{not json")
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(garbage)
    other = tmp_path / "other.json"
    other.write_text(json.dumps({"format": "something-else", "version": 1}))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(other)
    _rewrite(path, lambda doc: doc.pop("schedule"))
    with pytest.raises(CheckpointFormatError, match="schedule"):
        load_checkpoint(path)


def _set_layer(name, value):
    return lambda doc: doc["parameters"].update({name: value})


def _set_data(name, data):
    return lambda doc: doc["parameters"][name].update(data=data)


@pytest.mark.parametrize("edit, layer", [
    (_set_layer("W1", [1, 2, 3]), "W1"),
    (_set_layer("b2", {"data": [0.0] * 16}), "b2"),
    (_set_data("W3", ["x"] * 32), "W3"),
    (_set_data("b3", None), "b3"),
    (_set_data("b1", [[0.0] * 8, [0.0] * 8]), "b1"),
])
def test_malformed_layers_name_the_layer(saved, edit, layer):
    _, _, path = saved
    _rewrite(path, edit)
    with pytest.raises(CheckpointFormatError, match=layer):
        load_checkpoint(path)


def test_parameters_must_be_a_mapping(saved):
    _, _, path = saved
    _rewrite(path, lambda doc: doc.update(parameters=[]))
    with pytest.raises(CheckpointFormatError, match="parameters"):
        load_checkpoint(path)
