"""Universal compression of the spatial-domain model.

Pipeline: seeded uniform dither + uniform quantization (weights that
quantize to level 0 are pruned and frozen), optional codebook fine-tuning
under the Winograd-domain regularizer, LZW entropy coding, and a bit-exact
container format.

Container layout (all integers little-endian; see docs/container_format.md
for the normative description):

    offset  size  field
    0       8     magic "WSPC0001"
    8       8     quantization step (f64)
    16      8     dither seed (u64)
    24      8     total weight count N (u64)
    32      64    section table: 4 x (offset u64, length u64) in order
                  spec_json, pruned_bitmap, coded_levels, codebook
    96      4     CRC-32 over the concatenated section bytes
    100     ...   sections, back to back

Sections: spec_json is the raw network JSON; pruned_bitmap is the
LZW-coded bitmap (bit i set = weight i pruned, LSB-first); coded_levels is
the LZW-coded zigzag-varint stream of the unpruned levels in index order;
codebook holds (level i64, value f64) pairs after fine-tuning (empty when
values are just level * step).

The dither generator is a fixed 64-bit splitmix sequence so containers are
portable: U_i depends only on (seed, i). Levels use
round-half-away-from-zero, keeping the pruned set symmetric around zero.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .model import FilterBank
from .netspec import NetworkSpec

__all__ = [
    "MAGIC",
    "QuantizationRecord",
    "CompressedModel",
    "ContainerError",
    "LzwDecodeError",
    "dither_values",
    "dithered_quantize",
    "dither_cancel",
    "lzw_encode",
    "lzw_decode",
    "entropy_encode",
    "entropy_decode",
    "delta_for_target_sparsity",
    "compress",
    "decompress",
    "fine_tune_codebook",
]

MAGIC = b"WSPC0001"
HEADER_SIZE = 100


class ContainerError(ValueError):
    pass


class LzwDecodeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# dither + quantization
# ---------------------------------------------------------------------------

_SM_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SM_M1 = np.uint64(0xBF58476D1CE4E5B9)
_SM_M2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(indices: np.ndarray, seed: int) -> np.ndarray:
    """z_i = mix(seed + (i+1)*gamma); the standard splitmix64 output chain."""
    z = (np.uint64(seed) + (indices.astype(np.uint64) + np.uint64(1)) * _SM_GAMMA)
    z = (z ^ (z >> np.uint64(30))) * _SM_M1
    z = (z ^ (z >> np.uint64(27))) * _SM_M2
    return z ^ (z >> np.uint64(31))


def dither_values(count: int, delta: float, seed: int) -> np.ndarray:
    """U_i, i < count: i.i.d. uniform on (-delta/2, delta/2), regenerable
    from the seed. The endpoints are excluded so an exact zero always
    quantizes back to level 0."""
    z = _splitmix64(np.arange(count), seed)
    u01 = (z.astype(np.float64) + 0.5) / 2.0**64  # strictly inside (0, 1)
    return (u01 - 0.5) * delta


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass
class QuantizationRecord:
    """Quantized levels plus everything needed to reproduce them."""

    delta: float
    seed: int
    levels: np.ndarray  # int64, level 0 = pruned
    count: int = field(init=False)

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=np.int64)
        self.count = int(self.levels.size)

    @property
    def pruned(self) -> np.ndarray:
        return self.levels == 0

    @property
    def pruned_fraction(self) -> float:
        return float(self.pruned.sum()) / self.count if self.count else 0.0

    def quantized_values(self) -> np.ndarray:
        return self.delta * self.levels.astype(np.float64)


def dithered_quantize(weights, delta: float, seed: int) -> QuantizationRecord:
    """q_i = delta * round((a_i + U_i) / delta) with the seeded dither;
    weights rounded to level 0 are pruned and fixed at zero."""
    if delta <= 0:
        raise ValueError(f"dithered_quantize: delta must be positive, got {delta}")
    a = np.asarray(weights, dtype=np.float64).ravel()
    u = dither_values(a.size, delta, seed)
    levels = _round_half_away((a + u) / delta).astype(np.int64)
    return QuantizationRecord(delta=delta, seed=seed, levels=levels)


def dither_cancel(record: QuantizationRecord, codebook: dict[int, float] | None = None) -> np.ndarray:
    """Deployed weights: qhat_i = value(level_i) - U_i for unpruned i, else 0.

    value(level) is delta*level unless the codebook overrides it after
    fine-tuning. For unchanged codebooks |qhat - a| <= delta/2.
    """
    u = dither_values(record.count, record.delta, record.seed)
    values = record.quantized_values()
    if codebook:
        for level, value in codebook.items():
            if level == 0:
                raise ValueError("dither_cancel: level 0 is pruned and has no codebook entry")
            values[record.levels == level] = value
    return np.where(record.pruned, 0.0, values - u)


def delta_for_target_sparsity(weights, target_percent: float, seed: int,
                              tol: float = 0.25, max_iter: int = 60) -> float:
    """Smallest-ish quantization step whose zero-level fraction reaches the
    target spatial sparsity (percent), found by bisection on the realized
    fraction with the actual dither sequence."""
    a = np.asarray(weights, dtype=np.float64).ravel()
    if not 0 < target_percent < 100:
        raise ValueError("delta_for_target_sparsity: target must be in (0,100)")
    target = target_percent / 100.0
    lo, hi = 1e-12, 8.0 * float(np.abs(a).max()) + 1e-12
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        frac = dithered_quantize(a, mid, seed).pruned_fraction
        if abs(frac - target) * 100.0 <= tol:
            return mid
        if frac < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# LZW with variable-width codes
# ---------------------------------------------------------------------------

_LZW_MIN_WIDTH = 9
_LZW_MAX_WIDTH = 16
_LZW_TABLE_MAX = 1 << _LZW_MAX_WIDTH
_SEGMENT_CODES = _LZW_TABLE_MAX - 256  # codes per segment before both sides reset


def _code_width(table_size: int) -> int:
    return max(_LZW_MIN_WIDTH, (table_size - 1).bit_length())


class _BitWriter:
    def __init__(self):
        self.out = bytearray()
        self.acc = 0
        self.nbits = 0

    def write(self, value: int, width: int):
        self.acc |= value << self.nbits
        self.nbits += width
        while self.nbits >= 8:
            self.out.append(self.acc & 0xFF)
            self.acc >>= 8
            self.nbits -= 8

    def flush(self) -> bytes:
        if self.nbits:
            self.out.append(self.acc & 0xFF)
            self.acc, self.nbits = 0, 0
        return bytes(self.out)


class _BitReader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0  # bit position

    def read(self, width: int) -> int:
        end = self.pos + width
        if end > 8 * len(self.data):
            raise LzwDecodeError(f"truncated stream at bit {self.pos}")
        value = 0
        got = 0
        while got < width:
            byte = self.data[(self.pos + got) // 8]
            offset = (self.pos + got) % 8
            take = min(8 - offset, width - got)
            value |= ((byte >> offset) & ((1 << take) - 1)) << got
            got += take
        self.pos = end
        return value


def lzw_encode(data: bytes) -> bytes:
    """Variable-width LZW over bytes.

    Codes start at 9 bits; the width for the j-th code of a segment covers
    exactly the 256+j-1 table entries the encoder has assigned, so both
    sides derive widths from the code index alone. When the table reaches
    2^16 entries both sides reset to the initial byte table. The payload is
    prefixed with the raw length (u64) so the decoder knows where to stop.
    """
    writer = _BitWriter()
    table: dict[bytes, int] = {bytes([i]): i for i in range(256)}
    emitted_in_segment = 0
    w = b""
    for i in range(len(data)):
        c = data[i : i + 1]
        wc = w + c
        if wc in table:
            w = wc
            continue
        emitted_in_segment += 1
        writer.write(table[w], _code_width(256 + emitted_in_segment - 1))
        table[wc] = len(table)
        if len(table) >= _LZW_TABLE_MAX:
            table = {bytes([i]): i for i in range(256)}
            emitted_in_segment = 0
        w = c
    if w:
        emitted_in_segment += 1
        writer.write(table[w], _code_width(256 + emitted_in_segment - 1))
    return struct.pack("<Q", len(data)) + writer.flush()


def lzw_decode(blob: bytes) -> bytes:
    if len(blob) < 8:
        raise LzwDecodeError("missing length prefix at bit 0")
    (raw_len,) = struct.unpack("<Q", blob[:8])
    reader = _BitReader(blob[8:])
    out = bytearray()
    table: dict[int, bytes] = {i: bytes([i]) for i in range(256)}
    read_in_segment = 0
    prev: bytes | None = None
    while len(out) < raw_len:
        read_in_segment += 1
        width = _code_width(256 + read_in_segment - 1)
        pos = reader.pos
        code = reader.read(width)
        if prev is None:
            if code >= 256:
                raise LzwDecodeError(f"invalid first code {code} at bit {pos}")
            entry = table[code]
        elif code in table:
            entry = table[code]
            table[len(table)] = prev + entry[:1]
        elif code == len(table):
            entry = prev + prev[:1]
            table[len(table)] = entry
        else:
            raise LzwDecodeError(f"invalid code {code} at bit {pos}")
        out += entry
        # mirror the encoder's reset: it resets after assigning entry
        # number TABLE_MAX; our table lags one entry behind its table
        if read_in_segment == _SEGMENT_CODES:
            table = {i: bytes([i]) for i in range(256)}
            read_in_segment = 0
            prev = None
        else:
            prev = entry
    if len(out) != raw_len:
        raise LzwDecodeError(f"decoded {len(out)} bytes, expected {raw_len}")
    return bytes(out)


def _zigzag(n: int) -> int:
    return (n << 1) if n >= 0 else (-(n << 1) - 1)


def _unzigzag(u: int) -> int:
    return (u >> 1) if (u & 1) == 0 else -((u + 1) >> 1)


def _varint_bytes(values) -> bytes:
    out = bytearray()
    for v in values:
        u = _zigzag(int(v))
        while True:
            byte = u & 0x7F
            u >>= 7
            if u:
                out.append(byte | 0x80)
            else:
                out.append(byte)
                break
    return bytes(out)


def _varint_parse(data: bytes) -> list[int]:
    out = []
    u = 0
    shift = 0
    for pos, byte in enumerate(data):
        u |= (byte & 0x7F) << shift
        if byte & 0x80:
            shift += 7
        else:
            out.append(_unzigzag(u))
            u, shift = 0, 0
    if shift:
        raise LzwDecodeError(f"dangling varint at byte {len(data)}")
    return out


def entropy_encode(levels) -> bytes:
    """Lossless coding of an integer stream: zigzag varints, then LZW."""
    return lzw_encode(_varint_bytes(levels))


def entropy_decode(blob: bytes) -> list[int]:
    return _varint_parse(lzw_decode(blob))


# ---------------------------------------------------------------------------
# container
# ---------------------------------------------------------------------------

def _bitmap_pack(mask: np.ndarray) -> bytes:
    return np.packbits(mask.astype(np.uint8), bitorder="little").tobytes()


def _bitmap_unpack(data: bytes, count: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    if bits.size < count:
        raise ContainerError(f"bitmap holds {bits.size} bits, need {count}")
    return bits[:count].astype(bool)


def _codebook_pack(codebook: dict[int, float]) -> bytes:
    out = bytearray(struct.pack("<Q", len(codebook)))
    for level in sorted(codebook):
        out += struct.pack("<qd", level, codebook[level])
    return bytes(out)


def _codebook_parse(data: bytes) -> dict[int, float]:
    if len(data) < 8:
        raise ContainerError("codebook section truncated")
    (count,) = struct.unpack("<Q", data[:8])
    if len(data) != 8 + 16 * count:
        raise ContainerError(f"codebook section length {len(data)} != {8 + 16 * count}")
    book = {}
    for i in range(count):
        level, value = struct.unpack_from("<qd", data, 8 + 16 * i)
        book[level] = value
    return book


@dataclass
class CompressedModel:
    """In-memory view of one container."""

    net: NetworkSpec
    record: QuantizationRecord
    codebook: dict[int, float] = field(default_factory=dict)

    def deployed_weights(self) -> np.ndarray:
        return dither_cancel(self.record, self.codebook)

    def deployed_bank(self, template: FilterBank) -> FilterBank:
        return template.from_flat(self.deployed_weights())

    def to_bytes(self) -> bytes:
        spec_json = self.net.to_json().encode()
        bitmap = lzw_encode(_bitmap_pack(self.record.pruned))
        levels = entropy_encode(self.record.levels[~self.record.pruned])
        codebook = _codebook_pack(self.codebook)
        sections = [spec_json, bitmap, levels, codebook]
        crc = zlib.crc32(b"".join(sections)) & 0xFFFFFFFF
        table = bytearray()
        offset = HEADER_SIZE
        for sec in sections:
            table += struct.pack("<QQ", offset, len(sec))
            offset += len(sec)
        header = (
            MAGIC
            + struct.pack("<d", self.record.delta)
            + struct.pack("<Q", self.record.seed)
            + struct.pack("<Q", self.record.count)
            + bytes(table)
            + struct.pack("<I", crc)
        )
        assert len(header) == HEADER_SIZE
        return header + b"".join(sections)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "CompressedModel":
        if len(blob) < HEADER_SIZE:
            raise ContainerError(f"container too short: {len(blob)} bytes")
        if blob[:8] != MAGIC:
            raise ContainerError(f"bad magic {blob[:8]!r}, expected {MAGIC!r}")
        (delta,) = struct.unpack_from("<d", blob, 8)
        (seed,) = struct.unpack_from("<Q", blob, 16)
        (count,) = struct.unpack_from("<Q", blob, 24)
        sections = []
        for i in range(4):
            off, length = struct.unpack_from("<QQ", blob, 32 + 16 * i)
            if off + length > len(blob):
                raise ContainerError(f"section {i} range {off}+{length} beyond container")
            sections.append(blob[off : off + length])
        (crc,) = struct.unpack_from("<I", blob, 96)
        actual = zlib.crc32(b"".join(sections)) & 0xFFFFFFFF
        if actual != crc:
            raise ContainerError(f"checksum mismatch: header 0x{crc:08x}, computed 0x{actual:08x}")
        net = NetworkSpec.from_json(sections[0].decode())
        pruned = _bitmap_unpack(lzw_decode(sections[1]), count)
        coded = entropy_decode(sections[2])
        if len(coded) != int((~pruned).sum()):
            raise ContainerError(
                f"level stream has {len(coded)} entries for {int((~pruned).sum())} unpruned weights"
            )
        levels = np.zeros(count, dtype=np.int64)
        levels[~pruned] = coded
        if (levels[~pruned] == 0).any():
            raise ContainerError("unpruned weight carries level 0")
        record = QuantizationRecord(delta=delta, seed=seed, levels=levels)
        return cls(net=net, record=record, codebook=_codebook_parse(sections[3]))

    def size_report(self) -> dict:
        blob = self.to_bytes()
        spec_json = self.net.to_json().encode()
        original = 8 * self.record.count
        payload = len(blob) - HEADER_SIZE - len(spec_json)
        return {
            "original_bytes": original,
            "container_bytes": len(blob),
            "payload_bytes": payload,
            "cr_total": original / len(blob),
            "cr_payload": original / payload if payload else float("inf"),
        }


def compress(net: NetworkSpec, bank: FilterBank, delta: float, seed: int,
             codebook: dict[int, float] | None = None) -> CompressedModel:
    record = dithered_quantize(bank.flat(), delta, seed)
    return CompressedModel(net=net, record=record, codebook=dict(codebook or {}))


def decompress(blob: bytes) -> CompressedModel:
    return CompressedModel.from_bytes(blob)


# ---------------------------------------------------------------------------
# codebook fine-tuning
# ---------------------------------------------------------------------------

def fine_tune_codebook(
    record: QuantizationRecord,
    net: NetworkSpec,
    template: FilterBank,
    dataset,
    s_wd: float,
    alpha: float,
    steps: int,
    learning_rate: float = 1e-3,
    zeta0: float = math.log(1e-2),
    batch_size: int = 32,
    seed: int = 0,
    scope: str = "global",
):
    """Gradient descent on the shared value of each nonzero level.

    The deployed weights are value(level_i) - U_i; each step averages the
    per-weight gradient of C = E + exp(zeta)*R_wd - alpha*zeta within every
    level cluster and moves that level's shared value. Pruned weights are
    excluded and stay exactly zero; zeta keeps learning alongside.

    Returns (codebook, zeta_trace).
    """
    from .model import build_training_graph, plans_for
    from .sparsity import coefficient, joint_cost, winograd_partial_l2

    rng = np.random.default_rng(seed)
    plans = plans_for(net)
    levels = record.levels
    u = dither_values(record.count, record.delta, record.seed)
    distinct = sorted(set(int(l) for l in levels[~record.pruned]))
    codebook = {l: record.delta * l for l in distinct}
    members = {l: np.flatnonzero(levels == l) for l in distinct}

    bank = template.copy()
    graph = build_training_graph(net, bank)
    train_x, train_y = dataset.train_arrays()
    zeta = float(zeta0)
    trace = []

    def sync_bank():
        values = np.zeros(record.count)
        for l in distinct:
            values[members[l]] = codebook[l]
        flat = np.where(record.pruned, 0.0, values - u)
        refreshed = template.from_flat(flat)
        for name in bank.names():
            bank[name][...] = refreshed[name]

    for step in range(steps):
        sync_bank()
        idx = rng.integers(0, train_x.shape[0], size=batch_size)
        e = graph.run(train_x[idx], train_y[idx])
        grads = graph.gradients()
        if s_wd > 0 and plans:
            reg = winograd_partial_l2(
                {name: bank[name] for name in plans}, plans, s_wd, scope
            )
            coef = coefficient(zeta)
            for name, g in reg.grads.items():
                grads[name] = grads[name] + coef * g
            r_wd = reg.value
        else:
            r_wd = 0.0
        flat_grad = np.concatenate([grads[name].ravel() for name in bank.names()])
        for l in distinct:
            codebook[l] -= learning_rate * float(flat_grad[members[l]].mean())
        zeta -= learning_rate * joint_cost(e, r_wd, 0.0, zeta, 0.0, alpha).dzeta_wd
        trace.append({"step": step, "E": e, "R_WD": r_wd, "zeta_WD": zeta})

    sync_bank()
    return codebook, trace
