import numpy as np
import pytest

from capsdbn.capsnet import CapsNetSpec, init_capsnet_params
from capsdbn.checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    decode_tensor,
    encode_tensor,
    load_capsnet,
    load_dbn,
    load_fusion,
    read_checkpoint,
    save_capsnet,
    save_dbn,
    save_fusion,
    write_checkpoint,
)
from capsdbn.dbn import CrbmSpec, DbnStack, init_crbm_params
from capsdbn.errors import ConfigurationError
from capsdbn.hybrid import FusionHead
from capsdbn.numerics import RandomStream
from capsdbn.preprocess import BatchWhitener


class TestContainer:
    def test_section_roundtrip(self, tmp_path):
        path = tmp_path / "x.ckpt"
        arr = np.arange(12, dtype=np.float32).reshape(3, 4)
        write_checkpoint(path, {"kind": "demo", "blob": b"\x00\x01", "tensor": arr})
        sections = read_checkpoint(path)
        assert list(sections) == ["kind", "blob", "tensor"]
        assert sections["kind"] == b"demo"
        assert sections["blob"] == b"\x00\x01"
        np.testing.assert_array_equal(decode_tensor(sections["tensor"]), arr)

    def test_save_load_save_byte_identical(self, tmp_path):
        a = tmp_path / "a.ckpt"
        b = tmp_path / "b.ckpt"
        rng = np.random.default_rng(1)
        sections = {"kind": "demo", "w": rng.normal(size=(4, 5)).astype(np.float32),
                    "meta": "k=v\n"}
        write_checkpoint(a, sections)
        loaded = read_checkpoint(a)
        write_checkpoint(b, {"kind": loaded["kind"].decode(),
                             "w": decode_tensor(loaded["w"]),
                             "meta": loaded["meta"].decode()})
        assert a.read_bytes() == b.read_bytes()

    def test_magic_and_version_validated(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ConfigurationError, match="magic"):
            read_checkpoint(path)
        blob = bytearray(MAGIC)
        blob += (FORMAT_VERSION + 1).to_bytes(4, "little")
        blob += (0).to_bytes(4, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(ConfigurationError, match="version"):
            read_checkpoint(path)

    def test_payloads_little_endian_f32(self):
        arr = np.array([1.5], dtype=np.float64)
        payload = encode_tensor(arr)
        assert payload[:4] == (1).to_bytes(4, "little")
        assert payload[4:8] == (1).to_bytes(4, "little")
        assert payload[8:] == np.float32(1.5).tobytes()


def tiny_caps():
    spec = CapsNetSpec(input_shape=(1, 8, 8), conv_filters=2, conv_kernel=3,
                       primary_groups=2, primary_dim=2, primary_kernel=3,
                       primary_stride=2, category_count=2, category_dim=2,
                       routing_iters=1)
    return spec, init_capsnet_params(spec, RandomStream(3))


def tiny_stack():
    specs = [CrbmSpec(visible_extent=8, visible_channels=1, groups=2,
                      filter_extent=3, pool_window=2),
             CrbmSpec(visible_extent=3, visible_channels=2, groups=3,
                      filter_extent=2, pool_window=2)]
    stream = RandomStream(4)
    return DbnStack(layers=[(s, init_crbm_params(s, stream.child(i)))
                            for i, s in enumerate(specs)])


class TestModelSerialization:
    def test_capsnet_roundtrip_bit_exact(self, tmp_path):
        spec, params = tiny_caps()
        path = tmp_path / "caps.ckpt"
        save_capsnet(path, spec, params, "cfg=1\n")
        spec2, params2, config_text = load_capsnet(path)
        assert spec2 == spec
        assert config_text == "cfg=1\n"
        for a, b in zip(params.arrays(), params2.arrays()):
            assert np.array_equal(a, b)
            assert b.dtype == np.float32

    def test_capsnet_wrong_kind_rejected(self, tmp_path):
        stack = tiny_stack()
        path = tmp_path / "model.ckpt"
        save_dbn(path, stack, None, "")
        with pytest.raises(ConfigurationError, match="expected a capsnet"):
            load_capsnet(path)

    def test_dbn_roundtrip_with_whitener(self, tmp_path):
        stack = tiny_stack()
        whitener = BatchWhitener(eps=1e-5).fit(
            RandomStream(5).uniform((6, 1, 8, 8)).astype(np.float32))
        path = tmp_path / "dbn.ckpt"
        save_dbn(path, stack, whitener, "cfg=2\n")
        stack2, whitener2, config_text = load_dbn(path)
        assert config_text == "cfg=2\n"
        assert len(stack2.layers) == 2
        for (s1, p1), (s2, p2) in zip(stack.layers, stack2.layers):
            assert s1 == s2
            assert np.array_equal(p1.filters, p2.filters)
            assert np.array_equal(p1.hidden_bias, p2.hidden_bias)
            assert np.array_equal(p1.visible_bias, p2.visible_bias)
        assert whitener2.eps == 1e-5
        np.testing.assert_array_equal(whitener.mean_, whitener2.mean_)
        np.testing.assert_array_equal(whitener.scale_, whitener2.scale_)

    def test_dbn_without_whitener(self, tmp_path):
        path = tmp_path / "dbn.ckpt"
        save_dbn(path, tiny_stack(), None, "")
        _, whitener, _ = load_dbn(path)
        assert whitener is None

    def test_fusion_roundtrip(self, tmp_path):
        head = FusionHead(weights=RandomStream(6).normal((3, 7)).astype(np.float32),
                          bias=np.zeros(3, dtype=np.float32))
        path = tmp_path / "fusion.ckpt"
        save_fusion(path, head, "")
        head2, _ = load_fusion(path)
        assert np.array_equal(head.weights, head2.weights)
        assert np.array_equal(head.bias, head2.bias)

    def test_model_save_load_save_byte_identical(self, tmp_path):
        spec, params = tiny_caps()
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_capsnet(a, spec, params, "cfg=1\n")
        spec2, params2, text = load_capsnet(a)
        save_capsnet(b, spec2, params2, text)
        assert a.read_bytes() == b.read_bytes()

    def test_corrupt_transform_dims_rejected(self, tmp_path):
        spec, params = tiny_caps()
        params.transforms = params.transforms[:1]
        path = tmp_path / "caps.ckpt"
        save_capsnet(path, spec, params, "")
        with pytest.raises(ConfigurationError, match="transform"):
            load_capsnet(path)
