#!/usr/bin/env python3
"""
Tests for the container format and the compress / decompress pipeline.
"""

import struct

import pytest
import torch
import torch.nn.functional as F

from codec import (
    HEADER,
    CompressedObject,
    compress,
    decode_latents,
    decode_values,
    decompress,
    encode_image,
    encode_values,
    expected_stream_count,
    read_compressed,
    write_compressed,
)
from constants import CUSTOM_VARIANT_ID, FORMAT_VERSION, MAGIC, UNKNOWN_LAMBDA_INDEX
from entropy import default_gaussian_tables
from errors import CodingError, DecodeError, DimensionError, IncompatibleStreamError
from range_coder import RangeDecoder, RangeEncoder
from transforms import assemble_model


def smooth_image(h, w, seed=0):
    g = torch.Generator().manual_seed(seed)
    base = torch.rand(1, 3, h // 8 + 2, w // 8 + 2, generator=g)
    return F.interpolate(base, size=(h, w), mode="bilinear", align_corners=False)[0]


@pytest.fixture
def model(tiny_config):
    return assemble_model(tiny_config, seed=0).eval()


@pytest.fixture
def image():
    return smooth_image(70, 90)


class TestContainer:
    """Byte layout and header validation."""

    @pytest.fixture
    def obj(self):
        return CompressedObject(
            variant_id=5, lambda_index=3, orig_height=70, orig_width=90,
            padded_height=128, padded_width=128,
            z_stream=b"\x01\x02\x03\x04", y_streams=[b"abcd", b"", b"xyz0"],
        )

    def test_layout(self, obj):
        data = obj.to_bytes()
        assert data[:4] == MAGIC
        assert data[4] == FORMAT_VERSION
        assert len(data) == HEADER.size + 4 + 4 + 2 + 3 * 4 + 8
        assert obj.num_bytes == len(data)
        assert obj.bpp == pytest.approx(len(data) * 8 / (70 * 90))

    def test_parse(self, obj):
        assert CompressedObject.from_bytes(obj.to_bytes()) == obj

    def test_bad_magic(self, obj):
        data = b"JPEG" + obj.to_bytes()[4:]
        with pytest.raises(IncompatibleStreamError):
            CompressedObject.from_bytes(data)

    def test_future_version(self, obj):
        data = bytearray(obj.to_bytes())
        data[4] = FORMAT_VERSION + 1
        with pytest.raises(IncompatibleStreamError):
            CompressedObject.from_bytes(bytes(data))

    @pytest.mark.parametrize("cut", [3, HEADER.size + 2, HEADER.size + 6, -1])
    def test_truncated(self, obj, cut):
        with pytest.raises(DecodeError):
            CompressedObject.from_bytes(obj.to_bytes()[:cut])

    def test_trailing_bytes(self, obj):
        with pytest.raises(DecodeError):
            CompressedObject.from_bytes(obj.to_bytes() + b"\x00")

    def test_inconsistent_sizes(self, obj):
        header = struct.pack("<4sBBBIIII", MAGIC, FORMAT_VERSION, 5, 3, 70, 90, 100, 128)
        with pytest.raises(DecodeError):
            CompressedObject.from_bytes(header + obj.to_bytes()[HEADER.size:])

    def test_file_round_trip(self, obj, tmp_path):
        path = write_compressed(obj, tmp_path / "out" / "image.s2c")
        assert read_compressed(path) == obj


class TestEscapeCoding:
    """Values beyond a table's support."""

    def test_escaped_values_round_trip(self):
        tables = default_gaussian_tables()
        values = [0, 1, -1, 7, -1000, 70000, -(1 << 31)]
        indexes = [0] * len(values)
        encoder = RangeEncoder()
        encode_values(encoder, values, indexes, tables)
        decoded = decode_values(RangeDecoder(encoder.finish()), indexes, tables)
        assert decoded == values

    def test_value_too_large(self):
        with pytest.raises(CodingError):
            encode_values(RangeEncoder(), [1 << 31], [0], default_gaussian_tables())


class TestPipeline:
    """Compress / decompress with a small model."""

    def test_latents_are_bit_exact(self, model, image):
        obj, y_hat_enc = encode_image(image, model)
        parsed = CompressedObject.from_bytes(obj.to_bytes())
        y_hat_dec, z_hat = decode_latents(parsed, model)
        assert torch.equal(y_hat_enc, y_hat_dec)
        assert z_hat.shape == (1, 16, 2, 2)

    def test_matches_estimation_pass(self, model, image):
        _, y_hat = encode_image(image, model)
        with torch.no_grad():
            out = model(image.unsqueeze(0), noisy=False)
        assert torch.allclose(out["bundle"].y_hat, y_hat, atol=1e-5)

    def test_decompress_shape_and_range(self, model, image):
        obj = compress(image, model, lambda_index=2)
        x_hat = decompress(obj, model)
        assert x_hat.shape == (1, 3, 70, 90)
        assert x_hat.min() >= 0 and x_hat.max() <= 1
        assert obj.lambda_index == 2
        assert obj.variant_id == CUSTOM_VARIANT_ID
        assert (obj.padded_height, obj.padded_width) == (128, 128)

    def test_default_lambda_index(self, model, image):
        assert compress(image, model).lambda_index == UNKNOWN_LAMBDA_INDEX

    def test_stream_count(self, model, image):
        obj = compress(image, model)
        assert len(obj.y_streams) == expected_stream_count(model) == 8

    def test_deterministic(self, model, image):
        assert compress(image, model).to_bytes() == compress(image, model).to_bytes()

    def test_batch_rejected(self, model):
        with pytest.raises(DimensionError):
            compress(torch.rand(2, 3, 64, 64), model)

    def test_wrong_variant(self, model, image):
        obj = compress(image, model)
        obj.variant_id = 3
        with pytest.raises(IncompatibleStreamError):
            decompress(obj, model)

    def test_missing_stream(self, model, image):
        obj = compress(image, model)
        obj.y_streams = obj.y_streams[:-1]
        with pytest.raises(IncompatibleStreamError):
            decompress(obj, model)

    @pytest.mark.parametrize("options,streams", [
        ({"context_mode": "hyperprior_only"}, 1),
        ({"checkerboard": False}, 4),
    ])
    def test_context_variants_round_trip(self, tiny_config_factory, image, options, streams):
        model = assemble_model(tiny_config_factory(**options), seed=1).eval()
        obj, y_hat_enc = encode_image(image, model)
        assert len(obj.y_streams) == streams
        y_hat_dec, _ = decode_latents(obj, model)
        assert torch.equal(y_hat_enc, y_hat_dec)

    def test_exact_multiple_of_64(self, model):
        image = smooth_image(64, 128, seed=3)
        obj = compress(image, model)
        assert (obj.orig_height, obj.orig_width) == (64, 128)
        assert decompress(obj, model).shape == (1, 3, 64, 128)


RANDOM_CASES = [(seed, int(h), int(w)) for seed, (h, w) in enumerate(
    torch.randint(24, 200, (20, 2), generator=torch.Generator().manual_seed(21)).tolist())]


class TestRandomImages:
    """Bit-exact latents for random sizes, fresh and trained weights."""

    @pytest.mark.parametrize("seed,height,width", RANDOM_CASES)
    def test_untrained(self, model, seed, height, width):
        self._check(model, smooth_image(height, width, seed=seed))

    @pytest.mark.parametrize("seed,height,width", RANDOM_CASES)
    def test_trained(self, trained_tiny_model, seed, height, width):
        self._check(trained_tiny_model, smooth_image(height, width, seed=seed))

    @staticmethod
    def _check(model, image):
        obj, y_hat_enc = encode_image(image, model)
        parsed = CompressedObject.from_bytes(obj.to_bytes())
        y_hat_dec, _ = decode_latents(parsed, model)
        assert torch.equal(y_hat_enc, y_hat_dec)
        assert decompress(parsed, model).shape == (1, 3, *image.shape[1:])

    def test_trained_weights_moved(self, model, trained_tiny_model):
        fresh = dict(model.named_parameters())
        moved = [name for name, p in trained_tiny_model.named_parameters() if not torch.equal(p, fresh[name])]
        assert len(moved) > len(fresh) // 2


class TestCorruptFiles:
    """Damaged latent streams decode to an image or raise DecodeError."""

    def _decode(self, obj, model):
        try:
            x_hat = decompress(obj, model)
        except DecodeError:
            return
        assert x_hat.shape == (1, 3, obj.orig_height, obj.orig_width)

    def test_flipped_stream_bytes(self, model, image):
        clean = compress(image, model)
        gen = torch.Generator().manual_seed(3)
        for _ in range(20):
            obj = CompressedObject.from_bytes(clean.to_bytes())
            streams = [obj.z_stream] + obj.y_streams
            target = int(torch.randint(len(streams), (1,), generator=gen))
            damaged = bytearray(streams[target])
            if not damaged:
                continue
            pos = int(torch.randint(len(damaged), (1,), generator=gen))
            damaged[pos] ^= int(torch.randint(1, 256, (1,), generator=gen))
            if target == 0:
                obj.z_stream = bytes(damaged)
            else:
                obj.y_streams[target - 1] = bytes(damaged)
            self._decode(obj, model)

    def test_truncated_streams(self, model, image):
        clean = compress(image, model)
        for index in range(len(clean.y_streams)):
            obj = CompressedObject.from_bytes(clean.to_bytes())
            obj.y_streams[index] = obj.y_streams[index][: len(obj.y_streams[index]) // 3]
            self._decode(obj, model)
        obj = CompressedObject.from_bytes(clean.to_bytes())
        obj.z_stream = b""
        self._decode(obj, model)
