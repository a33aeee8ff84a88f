import numpy as np
import pytest

from regflow.checkpoint import CheckpointError, load_checkpoint, meta_path, save_checkpoint
from regflow.data import ToyConfig, gen_toy
from regflow.flow import FlowConfig
from regflow.hypernet import HyperNetwork, Standardizer
from regflow.mdn import MdnModel
from regflow.trainer import heldout_nll


@pytest.fixture(scope="module")
def test_split():
    return gen_toy(ToyConfig(n_samples=200), 3, "test")


def models(ds):
    st = Standardizer.fit(ds.x, ds.y)
    yield HyperNetwork(1, FlowConfig(target_dim=1, hidden_widths=(8,), rk4_steps=5, t1=0.7), (6, 5),
                       output_scale=0.3, seed=4, standardizer=st)
    yield MdnModel(1, 1, k=3, hidden_widths=(7,), seed=2, standardizer=st)


def test_round_trip_preserves_nll(test_split, tmp_path):
    for i, model in enumerate(models(test_split)):
        path = save_checkpoint(model, tmp_path / f"m{i}")
        loaded = load_checkpoint(path)
        assert type(loaded) is type(model)
        np.testing.assert_array_equal(loaded.psi.data, model.psi.data)
        assert abs(heldout_nll(loaded, test_split) - heldout_nll(model, test_split)) <= 1e-12
        assert path.read_bytes() == save_checkpoint(loaded, tmp_path / f"again{i}").read_bytes()


def test_meta_file(test_split, tmp_path):
    flow_model, mdn_model = models(test_split)
    save_checkpoint(flow_model, tmp_path / "f.rgfl")
    text = meta_path(tmp_path / "f.rgfl").read_text()
    assert "magic=RGFL" in text and "flow_widths=8" in text and "hyper_widths=6,5" in text
    save_checkpoint(mdn_model, tmp_path / "m.rgmd", extra={"note": "x"})
    text = meta_path(tmp_path / "m.rgmd").read_text()
    assert "k=3" in text and "head_width=9" in text and "note=x" in text


def test_header_bytes(test_split, tmp_path):
    flow_model, _ = models(test_split)
    raw = save_checkpoint(flow_model, tmp_path / "f").read_bytes()
    assert raw[:4] == b"RGFL" and raw[4:8] == (1).to_bytes(4, "little")


def test_corrupt_files_rejected(test_split, tmp_path):
    model = next(models(test_split))
    raw = save_checkpoint(model, tmp_path / "f").read_bytes()
    for name, blob in [("magic", b"XXXX" + raw[4:]), ("version", raw[:4] + (9).to_bytes(4, "little") + raw[8:]),
                       ("short", raw[:-8]), ("long", raw + b"\0")]:
        (tmp_path / name).write_bytes(blob)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / name)
