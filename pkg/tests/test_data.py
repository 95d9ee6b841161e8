import hashlib
import json
import struct

import numpy as np
import pytest

from semtok import data as D
from semtok.transformer import Model, ModelConfig


def digest(ds):
    return hashlib.sha256(ds.images.tobytes() + ds.labels.tobytes()).hexdigest()


class TestShapes:
    def test_deterministic(self):
        assert digest(D.gen_shapes(40, seed=3)) == digest(D.gen_shapes(40, seed=3))
        assert digest(D.gen_shapes(40, seed=3)) != digest(D.gen_shapes(40, seed=4))

    @pytest.mark.parametrize("n,k", [(2000, 4), (101, 3), (7, 2)])
    def test_balanced(self, n, k):
        counts = np.bincount(D.gen_shapes(n, num_classes=k).labels, minlength=k)
        assert counts.max() - counts.min() <= 1

    def test_clean_background(self):
        ds = D.gen_shapes(20, clutter_level=0, noise_std=0.0)
        for img in ds.images[:, 0]:
            vals = np.unique(img)
            assert vals[0] == 0.0 and len(vals) == 2  # background and one glyph intensity

    def test_range_and_layout(self):
        ds = D.gen_shapes(30, image_size=24)
        assert ds.images.shape == (30, 1, 24, 24)
        assert ds.images.min() >= 0 and ds.images.max() <= 1
        assert ds.labels.dtype == np.int64

    def test_too_small(self):
        with pytest.raises(ValueError):
            D.gen_shapes(4, image_size=12)


class TestIdx:
    def test_round_trip(self, tmp_path):
        ds = D.gen_shapes(25, seed=2)
        D.write_idx(ds, tmp_path / "i", tmp_path / "l")
        back = D.load_idx(tmp_path / "i", tmp_path / "l")
        np.testing.assert_array_equal(back.images, ds.images)
        np.testing.assert_array_equal(back.labels, ds.labels)

    def test_header(self, tmp_path):
        D.write_idx(D.gen_shapes(3), tmp_path / "i", tmp_path / "l")
        assert (tmp_path / "i").read_bytes()[:16] == struct.pack(">IIII", 0x803, 3, 32, 32)
        assert (tmp_path / "l").read_bytes()[:8] == struct.pack(">II", 0x801, 3)

    def test_all_zero(self, tmp_path):
        (tmp_path / "i").write_bytes(struct.pack(">IIII", 0x803, 10, 28, 28) + bytes(10 * 28 * 28))
        (tmp_path / "l").write_bytes(struct.pack(">II", 0x801, 10) + bytes(10))
        ds = D.load_idx(tmp_path / "i", tmp_path / "l")
        assert len(ds) == 10 and not ds.images.any()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "i").write_bytes(struct.pack(">IIII", 0x801, 1, 2, 2) + bytes(4))
        (tmp_path / "l").write_bytes(struct.pack(">II", 0x801, 1) + bytes(1))
        with pytest.raises(D.FormatError):
            D.load_idx(tmp_path / "i", tmp_path / "l")

    def test_truncated(self, tmp_path):
        D.write_idx(D.gen_shapes(3), tmp_path / "i", tmp_path / "l")
        raw = (tmp_path / "i").read_bytes()
        (tmp_path / "i").write_bytes(raw[:-5])
        with pytest.raises(D.FormatError):
            D.load_idx(tmp_path / "i", tmp_path / "l")

    def test_count_mismatch(self, tmp_path):
        D.write_idx(D.gen_shapes(3), tmp_path / "i", tmp_path / "l")
        (tmp_path / "l").write_bytes(struct.pack(">II", 0x801, 2) + bytes(2))
        with pytest.raises(D.ConsistencyError):
            D.load_idx(tmp_path / "i", tmp_path / "l")


def small_model(**kw):
    return Model(ModelConfig(image_size=16, patch_size=4, d=8, heads=2, mlp_ratio=2, L_e=1, L_d=1, **kw),
                 seed=4)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        model = small_model()
        path = tmp_path / "m.stkc"
        D.save_checkpoint(model, path)
        back = D.load_checkpoint(path)
        assert back.config == model.config
        assert list(back.params) == list(model.params)
        for name, p in model.params.items():
            assert back.params[name].data.tobytes() == p.data.tobytes()
        D.save_checkpoint(back, tmp_path / "again.stkc")
        assert (tmp_path / "again.stkc").read_bytes() == path.read_bytes()

    def test_every_byte_flip_detected(self, tmp_path):
        path = tmp_path / "m.stkc"
        D.save_checkpoint(small_model(), path)
        raw = path.read_bytes()
        for pos in range(4, len(raw), max(1, len(raw) // 200)):
            bad = bytearray(raw)
            bad[pos] ^= 0x01
            path.write_bytes(bytes(bad))
            with pytest.raises((D.CorruptionError, D.FormatError)):
                D.load_checkpoint(path)

    def test_payload_flip_is_corruption(self, tmp_path):
        path = tmp_path / "m.stkc"
        D.save_checkpoint(small_model(), path)
        raw = bytearray(path.read_bytes())
        raw[-20] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(D.CorruptionError):
            D.load_checkpoint(path)

    def test_unknown_version(self, tmp_path):
        import zlib
        path = tmp_path / "m.stkc"
        D.save_checkpoint(small_model(), path)
        body = bytearray(path.read_bytes()[:-4])
        body[4:8] = struct.pack("<I", 9)
        path.write_bytes(bytes(body) + struct.pack("<I", zlib.crc32(bytes(body))))
        with pytest.raises(D.VersionError):
            D.load_checkpoint(path)

    def test_shape_mismatch_names_parameter(self, tmp_path):
        model = small_model()
        model.params["head.weight"].data = np.zeros((8, 3))
        path = tmp_path / "m.stkc"
        D.save_checkpoint(model, path)
        with pytest.raises(D.ShapeError, match="head.weight"):
            D.load_checkpoint(path)

    def test_local_checkpoint_has_no_decoder_selection(self, tmp_path):
        path = tmp_path / "m.stkc"
        D.save_checkpoint(small_model(penalty="local"), path)
        _, records = D.read_checkpoint(path)
        assert not [n for n in records if n.startswith("dec.") and ".sel." in n]


class TestConfig:
    def test_empty_gives_defaults(self):
        mc, tc = D.parse_config({})
        assert mc == ModelConfig() and tc == D.TrainConfig()

    def test_lambda_key(self):
        mc, _ = D.parse_config({"lambda": 0.25, "epochs": 3})
        assert mc.lam == 0.25

    def test_negative_lambda(self):
        with pytest.raises(D.ConfigError) as err:
            D.parse_config({"lambda": -1})
        assert err.value.pointer == "/lambda"

    def test_unknown_key(self):
        with pytest.raises(D.ConfigError) as err:
            D.parse_config({"epochs": 2, "learning_rat": 0.1})
        assert err.value.pointer == "/learning_rat"

    def test_wrong_type(self):
        with pytest.raises(D.ConfigError) as err:
            D.parse_config({"d": "wide"})
        assert err.value.pointer == "/d"

    def test_cross_field_invariant(self):
        with pytest.raises(D.ConfigError):
            D.parse_config({"d": 10, "heads": 4})

    def test_dump_round_trip(self, tmp_path):
        obj = {"penalty": "local", "lambda": 2.0, "epochs": 3, "seed": 9}
        dumped = D.dump_config(*D.parse_config(obj))
        path = tmp_path / "c.json"
        path.write_text(json.dumps(dumped))
        again = D.dump_config(*D.load_config(path))
        assert list(again) == list(dumped) and again == dumped

    def test_bad_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{nope")
        with pytest.raises(D.ConfigError):
            D.load_config(path)
