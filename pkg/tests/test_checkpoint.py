import pytest

from capnet.checkpoint import Checkpoint, check_compatible, dumps, load, loads, save
from capnet.config import Config
from capnet.core import AdamState, RngStream, adam_step
from capnet.errors import ConfigurationError, FormatError
from capnet.model import init_captioner

CFG = Config(image_size=32, grid_side=2, conv_channels=4, d=8, hidden=16, caption_embed=8, attr_embed=4,
             att_dim=8)


def trained_ckpt(cfg=CFG):
    p = init_captioner(cfg, 20, 12, seed=1)
    adam = AdamState.for_params(p, learning_rate=cfg.lr)
    rng = RngStream(2)
    for n in p.names():
        p.accumulate(n, rng.normal(p[n].shape))
    adam_step(p, adam)
    return Checkpoint(cfg, p, adam)


class TestRoundTrip:
    def test_bitwise(self, tmp_path):
        ck = trained_ckpt()
        save(tmp_path / "a.ckpt", ck)
        back = load(tmp_path / "a.ckpt")
        assert back.config == ck.config
        assert back.params.names() == ck.params.names()
        for n in ck.params.names():
            assert back.params[n].tobytes() == ck.params[n].tobytes()
            assert back.adam.m[n].tobytes() == ck.adam.m[n].tobytes()
            assert back.adam.v[n].tobytes() == ck.adam.v[n].tobytes()
        assert back.adam.t == 1 and back.adam.learning_rate == ck.adam.learning_rate
        assert dumps(back) == dumps(ck)

    def test_without_adam(self):
        ck = trained_ckpt()
        ck.adam = None
        assert loads(dumps(ck)).adam is None


class TestCorruption:
    def test_bad_magic(self):
        with pytest.raises(FormatError, match="magic"):
            loads(b"NOTCKPT" + dumps(trained_ckpt())[7:])

    def test_truncated(self):
        blob = dumps(trained_ckpt())
        with pytest.raises(FormatError, match="truncated at byte"):
            loads(blob[:len(blob) // 2])

    def test_trailing(self):
        with pytest.raises(FormatError):
            loads(dumps(trained_ckpt()) + b"\0")


class TestCompatibility:
    def test_matching(self):
        ck = trained_ckpt()
        check_compatible(ck, init_captioner(CFG, 20, 12, seed=0))

    def test_shape_mismatch_fails(self):
        ck = trained_ckpt()
        other = init_captioner(CFG.replace(hidden=12), 20, 12, seed=0)
        with pytest.raises(ConfigurationError, match="lstm.W"):
            check_compatible(ck, other)

    def test_missing_group(self):
        ck = trained_ckpt(CFG.replace(mode="vanilla"))
        with pytest.raises(ConfigurationError, match="attention"):
            check_compatible(ck, init_captioner(CFG, 20, 12, seed=0))
