import struct

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from gmcopula import checkpoint as ckpt
from gmcopula.config import (ConfigError, ModelConfig, build_model, dump_config, load_config, parse_lines)
from gmcopula.training import TrainConfig


class TestConfig:
    def test_defaults(self):
        m, t = load_config()
        assert m == ModelConfig() and t == TrainConfig()

    def test_file_and_overrides(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("# model\nchannels = 3\ncopula_components = 4  # K\n\nlr = 0.01\ncopula = false\n")
        m, t = load_config(p, ["lr=0.02", "stage = copula"])
        assert (m.channels, m.copula_components, m.copula) == (3, 4, False)
        assert t.lr == 0.02 and t.stage == "copula"

    def test_dump_round_trip(self, tmp_path):
        m, t = ModelConfig(channels=5, variant="mixgc"), TrainConfig(lr=0.5, stage="joint-ablation")
        p = tmp_path / "c.cfg"
        p.write_text(dump_config(m, t))
        assert load_config(p) == (m, t)

    @pytest.mark.parametrize("lines", [["nope = 1"], ["channels = two"], ["copula = maybe"], ["just words"],
                                       ["stage = sideways"]])
    def test_errors(self, lines):
        with pytest.raises(ConfigError):
            load_config(overrides=lines)

    def test_error_names_line(self):
        with pytest.raises(ConfigError, match="f.cfg:2"):
            parse_lines(["a = 1", "oops"], "f.cfg")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.cfg")


tensor_dicts = st.dictionaries(
    st.text("abcxyz._", min_size=1, max_size=8),
    st.lists(st.integers(0, 3), max_size=3).map(tuple),
    max_size=4)


class TestCheckpoint:
    @given(tensor_dicts, st.integers(0, 1000))
    def test_round_trip(self, shapes, seed):
        g = np.random.default_rng(seed)
        tensors = {k: torch.from_numpy(g.normal(size=s)) for k, s in shapes.items()}
        back, meta = ckpt.decode(ckpt.encode(tensors, {"seed": seed}))
        assert meta == {"seed": seed} and set(back) == set(tensors)
        assert all(torch.equal(back[k], tensors[k]) for k in tensors)

    def test_deterministic_bytes(self):
        a = {"b": torch.ones(2, 3, dtype=torch.float64), "a": torch.zeros(1, dtype=torch.float64)}
        b = {"a": torch.zeros(1, dtype=torch.float64), "b": torch.ones(2, 3, dtype=torch.float64)}
        assert ckpt.encode(a, {"x": 1, "y": 2}) == ckpt.encode(b, {"y": 2, "x": 1})

    def test_layout(self):
        buf = ckpt.encode({"w": torch.tensor([1.5], dtype=torch.float64)}, {})
        assert buf[:4] == b"GMCP"
        assert struct.unpack("<II", buf[4:12]) == (1, 2)
        assert buf.endswith(struct.pack("<d", 1.5))

    @pytest.mark.parametrize("mutate", [lambda b: b[:-3], lambda b: b"XXXX" + b[4:], lambda b: b + b"\0",
                                        lambda b: b[:4] + struct.pack("<I", 7) + b[8:], lambda b: b[:10]])
    def test_corrupt(self, mutate):
        buf = ckpt.encode({"w": torch.zeros(3, dtype=torch.float64)}, {"k": "v"})
        with pytest.raises(ckpt.CheckpointError):
            ckpt.decode(mutate(buf))

    def test_model_round_trip(self, tmp_path):
        torch.manual_seed(0)
        m = build_model(ModelConfig(channels=3))
        ckpt.save_model(tmp_path / "m.gmcp", m, {"best_epoch": 4})
        tensors, meta = ckpt.load(tmp_path / "m.gmcp")
        assert meta == {"best_epoch": 4}
        assert all(k.startswith(("marginal.", "copula.")) for k in tensors)
        torch.manual_seed(1)
        other = build_model(ModelConfig(channels=3))
        ckpt.load_state(other, tensors)
        assert all(torch.equal(v, other.state_dict()[k]) for k, v in m.state_dict().items())

    def test_marginal_only_into_joint(self):
        torch.manual_seed(0)
        marg = build_model(ModelConfig(channels=2, copula=False))
        joint = build_model(ModelConfig(channels=2))
        tensors = ckpt.model_tensors(marg)
        with pytest.raises(ckpt.CheckpointError):
            ckpt.load_state(joint, tensors)
        ckpt.load_state(joint, tensors, strict=False)
        assert all(torch.equal(joint.state_dict()[k], v) for k, v in tensors.items())

    def test_shape_mismatch(self):
        a = build_model(ModelConfig(channels=2))
        b = build_model(ModelConfig(channels=3))
        with pytest.raises(ckpt.CheckpointError):
            ckpt.load_state(b, ckpt.model_tensors(a))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ckpt.CheckpointError):
            ckpt.load(tmp_path / "none.gmcp")
