"""
Bitstream container and the compress / decompress pipeline.

File layout (little-endian):
    header  "<4sBBBIIII"  magic, version, variant_id, lambda_index,
                          orig_h, orig_w, padded_h, padded_w
    u32 length + z stream
    u16 stream count, then per y stream: u32 length + bytes
y streams are ordered group by group, anchors before non-anchors.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
import torch

from constants import (
    ESCAPE_LITERAL_BITS,
    FORMAT_VERSION,
    MAGIC,
    PAD_MULTIPLE,
    UNKNOWN_LAMBDA_INDEX,
)
from entropy import (
    CDFTables,
    checkerboard_mask,
    default_gaussian_tables,
    factorized_cdf_tables,
    round_half_away,
    scale_indexes,
    scctx_parameters,
)
from errors import CodingError, DecodeError, DimensionError, IncompatibleStreamError
from range_coder import RangeDecoder, RangeEncoder
from transforms import S2CModel, crop_to, pad_to_multiple
from utils import log_action

logger = logging.getLogger(__name__)

HEADER = struct.Struct("<4sBBBIIII")
LENGTH = struct.Struct("<I")
COUNT = struct.Struct("<H")
LITERAL_CDF = list(range((1 << ESCAPE_LITERAL_BITS) + 1))
LATENT_STRIDE = 16
HYPER_STRIDE = 64


@dataclass
class CompressedObject:
    variant_id: int
    lambda_index: int
    orig_height: int
    orig_width: int
    padded_height: int
    padded_width: int
    z_stream: bytes = b""
    y_streams: List[bytes] = field(default_factory=list)
    version: int = FORMAT_VERSION

    def to_bytes(self) -> bytes:
        parts = [
            HEADER.pack(MAGIC, self.version, self.variant_id, self.lambda_index,
                        self.orig_height, self.orig_width,
                        self.padded_height, self.padded_width),
            LENGTH.pack(len(self.z_stream)), self.z_stream,
            COUNT.pack(len(self.y_streams)),
        ]
        for stream in self.y_streams:
            parts.extend([LENGTH.pack(len(stream)), stream])
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "CompressedObject":
        """
        Raises:
            IncompatibleStreamError: wrong magic or format version
            DecodeError: truncated container
        """
        if len(data) < HEADER.size:
            raise DecodeError("container shorter than its header")
        magic, version, variant_id, lambda_index, oh, ow, ph, pw = HEADER.unpack_from(data)
        if magic != MAGIC:
            raise IncompatibleStreamError(f"not an S2C stream (magic {magic!r})")
        if version != FORMAT_VERSION:
            raise IncompatibleStreamError(
                f"stream format version {version}, this build reads {FORMAT_VERSION}"
            )
        if ph % PAD_MULTIPLE or pw % PAD_MULTIPLE or oh > ph or ow > pw or oh < 1 or ow < 1:
            raise DecodeError(f"inconsistent header sizes {oh}x{ow} / {ph}x{pw}")
        pos = HEADER.size
        z_stream, pos = _read_chunk(data, pos)
        if pos + COUNT.size > len(data):
            raise DecodeError("container truncated before the stream count")
        (count,) = COUNT.unpack_from(data, pos)
        pos += COUNT.size
        y_streams = []
        for _ in range(count):
            stream, pos = _read_chunk(data, pos)
            y_streams.append(stream)
        if pos != len(data):
            raise DecodeError(f"{len(data) - pos} trailing bytes after the last stream")
        return cls(variant_id, lambda_index, oh, ow, ph, pw, z_stream, y_streams, version)

    @property
    def num_bytes(self) -> int:
        return len(self.to_bytes())

    @property
    def bpp(self) -> float:
        return self.num_bytes * 8 / (self.orig_height * self.orig_width)


def _read_chunk(data: bytes, pos: int) -> Tuple[bytes, int]:
    if pos + LENGTH.size > len(data):
        raise DecodeError("container truncated inside a length prefix")
    (length,) = LENGTH.unpack_from(data, pos)
    pos += LENGTH.size
    if pos + length > len(data):
        raise DecodeError("container truncated inside a stream")
    return data[pos:pos + length], pos + length


def write_compressed(obj: CompressedObject, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(obj.to_bytes())
    return path


def read_compressed(path: Union[str, Path]) -> CompressedObject:
    return CompressedObject.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Symbol coding with escapes
# ---------------------------------------------------------------------------

def _zigzag(v: int) -> int:
    return 2 * v if v >= 0 else -2 * v - 1


def _unzigzag(u: int) -> int:
    return u // 2 if u % 2 == 0 else -(u + 1) // 2


def encode_values(encoder: RangeEncoder, values: Sequence[int], table_indexes: Sequence[int],
                  tables: CDFTables) -> None:
    """Values outside a table's support go out as escape + two 16-bit literals."""
    for value, t in zip(values, table_indexes):
        value, t = int(value), int(t)
        cdf = tables.cdfs[t]
        escape = tables.escape_symbol(t)
        symbol = value - tables.offsets[t]
        if 0 <= symbol < escape:
            encoder.encode(symbol, cdf)
            continue
        encoder.encode(escape, cdf)
        zz = _zigzag(value)
        if zz >= 1 << (2 * ESCAPE_LITERAL_BITS):
            raise CodingError(f"value {value} too large to escape-code")
        encoder.encode(zz >> ESCAPE_LITERAL_BITS, LITERAL_CDF)
        encoder.encode(zz & ((1 << ESCAPE_LITERAL_BITS) - 1), LITERAL_CDF)


def decode_values(decoder: RangeDecoder, table_indexes: Sequence[int], tables: CDFTables) -> List[int]:
    values = []
    for t in table_indexes:
        t = int(t)
        symbol = decoder.decode(tables.cdfs[t])
        if symbol < tables.escape_symbol(t):
            values.append(symbol + tables.offsets[t])
            continue
        high = decoder.decode(LITERAL_CDF)
        low = decoder.decode(LITERAL_CDF)
        values.append(_unzigzag((high << ESCAPE_LITERAL_BITS) | low))
    return values


def _ints_to_tensor(values: Sequence[int], like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(np.asarray(values, dtype=np.int64), device=like.device).to(like.dtype)


# ---------------------------------------------------------------------------
# Latent coding, shared step structure for both directions
# ---------------------------------------------------------------------------

def _phases(model: S2CModel, height: int, width: int, device) -> List[torch.Tensor]:
    """Boolean selection masks, one per coding phase of a group."""
    if model.context is None or not model.context.checkerboard:
        return [torch.ones(1, 1, height, width, dtype=torch.bool, device=device)]
    anchors = checkerboard_mask(height, width, device=device)
    return [anchors, ~anchors]


def expected_stream_count(model: S2CModel) -> int:
    if model.context is None:
        return 1
    return len(model.context.widths) * (2 if model.context.checkerboard else 1)


def _group_widths(model: S2CModel) -> Tuple[int, ...]:
    if model.context is None:
        return (model.config.latent_channels,)
    return tuple(model.context.widths)


def _params(model, decoded, z_hat, hyper, phase: int, current):
    if model.context is None:
        return scctx_parameters([], z_hat, model, hyper=hyper)
    anchor_hat = current if phase > 0 else None
    return scctx_parameters(decoded, z_hat, model, anchor_hat=anchor_hat, hyper=hyper)


@torch.no_grad()
def encode_image(x: torch.Tensor, model: S2CModel,
                 lambda_index: int = UNKNOWN_LAMBDA_INDEX) -> Tuple[CompressedObject, torch.Tensor]:
    """
    Compress one image in [0, 1], shape (3, H, W) or (1, 3, H, W).

    Returns:
        (compressed object, y_hat exactly as the decoder will rebuild it)
    """
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[0] != 1 or x.shape[1] != 3:
        raise DimensionError(f"compress takes a single RGB image, got shape {tuple(x.shape)}")
    model.eval()
    x_pad, (H, W) = pad_to_multiple(x)
    y = model.g_a(x_pad)
    z = model.h_a(y)

    z_tables = factorized_cdf_tables(model.entropy_bottleneck)
    z_ints = round_half_away(z).to(torch.int64)
    channel_of = np.broadcast_to(np.arange(z.shape[1]).reshape(1, -1, 1, 1), z.shape).ravel()
    encoder = RangeEncoder()
    encode_values(encoder, z_ints.cpu().numpy().ravel(), channel_of, z_tables)
    z_stream = encoder.finish()
    z_hat = _ints_to_tensor(z_ints.cpu().numpy().ravel(), z).view_as(z)
    hyper = model.h_s(z_hat)

    tables = default_gaussian_tables()
    phases = _phases(model, y.shape[2], y.shape[3], y.device)
    decoded, streams = [], []
    for y_g in torch.split(y, list(_group_widths(model)), dim=1):
        current = torch.zeros_like(y_g)
        for phase, mask in enumerate(phases):
            mu, sigma = _params(model, decoded, z_hat, hyper, phase, current)
            select = mask.expand_as(y_g)
            deltas = round_half_away(y_g - mu)[select].to(torch.int64).cpu().numpy()
            encoder = RangeEncoder()
            encode_values(encoder, deltas, scale_indexes(sigma[select]), tables)
            streams.append(encoder.finish())
            current = current.masked_scatter(select, _ints_to_tensor(deltas, y_g) + mu[select])
        decoded.append(current)

    obj = CompressedObject(
        variant_id=model.config.variant_id, lambda_index=lambda_index,
        orig_height=H, orig_width=W,
        padded_height=x_pad.shape[2], padded_width=x_pad.shape[3],
        z_stream=z_stream, y_streams=streams,
    )
    log_action("Codec", "image_compressed", {
        "size": [H, W], "bytes": obj.num_bytes, "bpp": round(obj.bpp, 5),
        "streams": len(streams),
    })
    return obj, torch.cat(decoded, dim=1)


def compress(x: torch.Tensor, model: S2CModel,
             lambda_index: int = UNKNOWN_LAMBDA_INDEX) -> CompressedObject:
    return encode_image(x, model, lambda_index)[0]


def _check_compatible(obj: CompressedObject, model: S2CModel) -> None:
    if obj.variant_id != model.config.variant_id:
        raise IncompatibleStreamError(
            f"stream was written by variant id {obj.variant_id}, "
            f"model {model.config.variant_name!r} has id {model.config.variant_id}"
        )
    if len(obj.y_streams) != expected_stream_count(model):
        raise IncompatibleStreamError(
            f"stream holds {len(obj.y_streams)} latent streams, "
            f"model expects {expected_stream_count(model)}"
        )


@torch.no_grad()
def decode_latents(obj: CompressedObject, model: S2CModel) -> Tuple[torch.Tensor, torch.Tensor]:
    """Rebuild (y_hat, z_hat) from the streams."""
    _check_compatible(obj, model)
    model.eval()
    param = next(model.parameters())
    C = model.config.latent_channels
    Ch = model.config.entropy.hyper_channels
    yh, yw = obj.padded_height // LATENT_STRIDE, obj.padded_width // LATENT_STRIDE
    zh, zw = obj.padded_height // HYPER_STRIDE, obj.padded_width // HYPER_STRIDE

    z_tables = factorized_cdf_tables(model.entropy_bottleneck)
    channel_of = np.broadcast_to(np.arange(Ch).reshape(1, -1, 1, 1), (1, Ch, zh, zw)).ravel()
    z_vals = decode_values(RangeDecoder(obj.z_stream), channel_of, z_tables)
    z_like = torch.empty(1, Ch, zh, zw, dtype=param.dtype, device=param.device)
    z_hat = _ints_to_tensor(z_vals, z_like).view_as(z_like)
    hyper = model.h_s(z_hat)

    tables = default_gaussian_tables()
    phases = _phases(model, yh, yw, param.device)
    decoded = []
    streams = iter(obj.y_streams)
    for width in _group_widths(model):
        current = torch.zeros(1, width, yh, yw, dtype=param.dtype, device=param.device)
        for phase, mask in enumerate(phases):
            mu, sigma = _params(model, decoded, z_hat, hyper, phase, current)
            select = mask.expand_as(current)
            deltas = decode_values(RangeDecoder(next(streams)), scale_indexes(sigma[select]), tables)
            current = current.masked_scatter(select, _ints_to_tensor(deltas, current) + mu[select])
        decoded.append(current)
    y_hat = torch.cat(decoded, dim=1)
    if y_hat.shape[1] != C:
        raise IncompatibleStreamError(f"decoded {y_hat.shape[1]} latent channels, expected {C}")
    return y_hat, z_hat


@torch.no_grad()
def decompress(obj: CompressedObject, model: S2CModel) -> torch.Tensor:
    """Reconstruction (1, 3, orig_h, orig_w) clamped to [0, 1]."""
    y_hat, _ = decode_latents(obj, model)
    x_hat = crop_to(model.g_s(y_hat), (obj.orig_height, obj.orig_width))
    return x_hat.clamp(0.0, 1.0)
