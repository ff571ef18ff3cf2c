"""Baseline sequential JPEG (ITU T.81) encoder and decoder.

The encoder writes a JFIF stream with 4:4:4 sampling, the Annex K
quantization tables scaled by the usual IJG quality rule and the Annex K
Huffman tables. The decoder reads any baseline Huffman stream with 8-bit
precision, 1 or 3 components, arbitrary sampling factors and optional
restart intervals, which covers what common encoders emit.
"""

import struct

import numpy as np

from .errors import FormatError

# Annex K.1, natural (row-major) order.
LUMA_QUANT = np.array([
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
]).reshape(8, 8)

CHROMA_QUANT = np.array([
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
]).reshape(8, 8)

# Annex K.3: (BITS, HUFFVAL) for DC/AC luminance and chrominance.
DC_LUMA = (
    [0, 1, 5, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0],
    list(range(12)),
)
DC_CHROMA = (
    [0, 3, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0],
    list(range(12)),
)
AC_LUMA = (
    [0, 2, 1, 3, 3, 2, 4, 3, 5, 5, 4, 4, 0, 0, 1, 0x7D],
    [
        0x01, 0x02, 0x03, 0x00, 0x04, 0x11, 0x05, 0x12, 0x21, 0x31, 0x41, 0x06,
        0x13, 0x51, 0x61, 0x07, 0x22, 0x71, 0x14, 0x32, 0x81, 0x91, 0xA1, 0x08,
        0x23, 0x42, 0xB1, 0xC1, 0x15, 0x52, 0xD1, 0xF0, 0x24, 0x33, 0x62, 0x72,
        0x82, 0x09, 0x0A, 0x16, 0x17, 0x18, 0x19, 0x1A, 0x25, 0x26, 0x27, 0x28,
        0x29, 0x2A, 0x34, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3A, 0x43, 0x44, 0x45,
        0x46, 0x47, 0x48, 0x49, 0x4A, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59,
        0x5A, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68, 0x69, 0x6A, 0x73, 0x74, 0x75,
        0x76, 0x77, 0x78, 0x79, 0x7A, 0x83, 0x84, 0x85, 0x86, 0x87, 0x88, 0x89,
        0x8A, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9A, 0xA2, 0xA3,
        0xA4, 0xA5, 0xA6, 0xA7, 0xA8, 0xA9, 0xAA, 0xB2, 0xB3, 0xB4, 0xB5, 0xB6,
        0xB7, 0xB8, 0xB9, 0xBA, 0xC2, 0xC3, 0xC4, 0xC5, 0xC6, 0xC7, 0xC8, 0xC9,
        0xCA, 0xD2, 0xD3, 0xD4, 0xD5, 0xD6, 0xD7, 0xD8, 0xD9, 0xDA, 0xE1, 0xE2,
        0xE3, 0xE4, 0xE5, 0xE6, 0xE7, 0xE8, 0xE9, 0xEA, 0xF1, 0xF2, 0xF3, 0xF4,
        0xF5, 0xF6, 0xF7, 0xF8, 0xF9, 0xFA,
    ],
)
AC_CHROMA = (
    [0, 2, 1, 2, 4, 4, 3, 4, 7, 5, 4, 4, 0, 1, 2, 0x77],
    [
        0x00, 0x01, 0x02, 0x03, 0x11, 0x04, 0x05, 0x21, 0x31, 0x06, 0x12, 0x41,
        0x51, 0x07, 0x61, 0x71, 0x13, 0x22, 0x32, 0x81, 0x08, 0x14, 0x42, 0x91,
        0xA1, 0xB1, 0xC1, 0x09, 0x23, 0x33, 0x52, 0xF0, 0x15, 0x62, 0x72, 0xD1,
        0x0A, 0x16, 0x24, 0x34, 0xE1, 0x25, 0xF1, 0x17, 0x18, 0x19, 0x1A, 0x26,
        0x27, 0x28, 0x29, 0x2A, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3A, 0x43, 0x44,
        0x45, 0x46, 0x47, 0x48, 0x49, 0x4A, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58,
        0x59, 0x5A, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68, 0x69, 0x6A, 0x73, 0x74,
        0x75, 0x76, 0x77, 0x78, 0x79, 0x7A, 0x82, 0x83, 0x84, 0x85, 0x86, 0x87,
        0x88, 0x89, 0x8A, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9A,
        0xA2, 0xA3, 0xA4, 0xA5, 0xA6, 0xA7, 0xA8, 0xA9, 0xAA, 0xB2, 0xB3, 0xB4,
        0xB5, 0xB6, 0xB7, 0xB8, 0xB9, 0xBA, 0xC2, 0xC3, 0xC4, 0xC5, 0xC6, 0xC7,
        0xC8, 0xC9, 0xCA, 0xD2, 0xD3, 0xD4, 0xD5, 0xD6, 0xD7, 0xD8, 0xD9, 0xDA,
        0xE2, 0xE3, 0xE4, 0xE5, 0xE6, 0xE7, 0xE8, 0xE9, 0xEA, 0xF2, 0xF3, 0xF4,
        0xF5, 0xF6, 0xF7, 0xF8, 0xF9, 0xFA,
    ],
)

ZIGZAG = np.array([
    0, 1, 8, 16, 9, 2, 3, 10,
    17, 24, 32, 25, 18, 11, 4, 5,
    12, 19, 26, 33, 40, 48, 41, 34,
    27, 20, 13, 6, 7, 14, 21, 28,
    35, 42, 49, 56, 57, 50, 43, 36,
    29, 22, 15, 23, 30, 37, 44, 51,
    58, 59, 52, 45, 38, 31, 39, 46,
    53, 60, 61, 54, 47, 55, 62, 63,
])


def _dct_matrix():
    k = np.arange(8)
    c = np.cos((2 * k[None, :] + 1) * k[:, None] * np.pi / 16) * np.sqrt(2 / 8)
    c[0] /= np.sqrt(2)
    return c


DCT = _dct_matrix()


def quant_table(base, quality):
    """IJG quality scaling of a base quantization table."""
    quality = int(quality)
    if not 1 <= quality <= 100:
        raise ValueError(f"JPEG quality must be in 1..100, got {quality}")
    scale = 5000 // quality if quality < 50 else 200 - 2 * quality
    return np.clip((base * scale + 50) // 100, 1, 255).astype(np.int64)


def huffman_codes(bits, values):
    """Canonical code table ``symbol -> (code, length)`` (Annex C)."""
    codes = {}
    code = 0
    k = 0
    for length in range(1, 17):
        for _ in range(bits[length - 1]):
            codes[values[k]] = (code, length)
            code += 1
            k += 1
        code <<= 1
    return codes


def rgb_to_ycbcr(rgb):
    rgb = rgb.astype(np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128
    return np.stack([y, cb, cr], axis=-1)


def ycbcr_to_rgb(ycc):
    y, cb, cr = ycc[..., 0], ycc[..., 1] - 128, ycc[..., 2] - 128
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b], axis=-1)


def _blocks(plane):
    """Split an (H, W) plane with H, W multiples of 8 into raster-ordered blocks."""
    h, w = plane.shape
    return plane.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3).reshape(-1, 8, 8)


def _pad_edge(plane, mult):
    h, w = plane.shape
    ph = -h % mult
    pw = -w % mult
    if ph or pw:
        plane = np.pad(plane, ((0, ph), (0, pw)), mode="edge")
    return plane


def _category(v):
    return int(abs(v)).bit_length()


def _value_bits(v, size):
    if v < 0:
        v += (1 << size) - 1
    return v


def _encode_scan(coefs, tables):
    """Entropy-code interleaved blocks; ``coefs`` is a list of (n_blocks, 64) per component."""
    parts = []
    emit = parts.append
    preds = [0] * len(coefs)
    n_blocks = coefs[0].shape[0]
    for b in range(n_blocks):
        for c, comp in enumerate(coefs):
            dc_codes, ac_codes = tables[c]
            zz = comp[b]
            diff = int(zz[0]) - preds[c]
            preds[c] = int(zz[0])
            size = _category(diff)
            code, length = dc_codes[size]
            emit(format(code, f"0{length}b"))
            if size:
                emit(format(_value_bits(diff, size), f"0{size}b"))
            nz = np.flatnonzero(zz[1:])
            prev = 0
            for pos in nz:
                run = pos - prev
                while run > 15:
                    code, length = ac_codes[0xF0]
                    emit(format(code, f"0{length}b"))
                    run -= 16
                v = int(zz[pos + 1])
                size = _category(v)
                code, length = ac_codes[(run << 4) | size]
                emit(format(code, f"0{length}b"))
                emit(format(_value_bits(v, size), f"0{size}b"))
                prev = pos + 1
            if prev < 63:
                code, length = ac_codes[0x00]
                emit(format(code, f"0{length}b"))
    bits = "".join(parts)
    bits += "1" * (-len(bits) % 8)
    if not bits:
        return b""
    data = int(bits, 2).to_bytes(len(bits) // 8, "big")
    return data.replace(b"\xff", b"\xff\x00")


def _segment(marker, payload):
    return struct.pack(">BBH", 0xFF, marker, len(payload) + 2) + payload


def _dht(table_class, table_id, spec):
    bits, values = spec
    return _segment(0xC4, bytes([(table_class << 4) | table_id]) + bytes(bits) + bytes(values))


def encode(rgb, quality):
    """Encode an (H, W, 3) uint8 RGB array; returns the JPEG byte string."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError("expected an (H, W, 3) uint8 array")
    h, w = rgb.shape[:2]
    qy = quant_table(LUMA_QUANT, quality)
    qc = quant_table(CHROMA_QUANT, quality)
    ycc = rgb_to_ycbcr(rgb)
    coefs = []
    for c, q in enumerate((qy, qc, qc)):
        plane = _pad_edge(ycc[..., c], 8) - 128.0
        blocks = _blocks(plane)
        freq = DCT @ blocks @ DCT.T
        quant = np.round(freq / q).astype(np.int64)
        coefs.append(quant.reshape(-1, 64)[:, ZIGZAG])

    dcl, acl = huffman_codes(*DC_LUMA), huffman_codes(*AC_LUMA)
    dcc, acc = huffman_codes(*DC_CHROMA), huffman_codes(*AC_CHROMA)
    scan = _encode_scan(coefs, [(dcl, acl), (dcc, acc), (dcc, acc)])

    out = [b"\xff\xd8"]
    out.append(_segment(0xE0, b"JFIF\x00\x01\x01\x00\x00\x01\x00\x01\x00\x00"))
    for tid, q in enumerate((qy, qc)):
        out.append(_segment(0xDB, bytes([tid]) + bytes(q.reshape(-1)[ZIGZAG].astype(np.uint8))))
    sof = struct.pack(">BHHB", 8, h, w, 3)
    for cid, tq in ((1, 0), (2, 1), (3, 1)):
        sof += bytes([cid, 0x11, tq])
    out.append(_segment(0xC0, sof))
    out.append(_dht(0, 0, DC_LUMA))
    out.append(_dht(1, 0, AC_LUMA))
    out.append(_dht(0, 1, DC_CHROMA))
    out.append(_dht(1, 1, AC_CHROMA))
    sos = bytes([3, 1, 0x00, 2, 0x11, 3, 0x11, 0, 63, 0])
    out.append(_segment(0xDA, sos))
    out.append(scan)
    out.append(b"\xff\xd9")
    return b"".join(out)


class _BitReader:
    def __init__(self, data):
        self.bits = "".join(format(b, "08b") for b in data)
        self.pos = 0

    def read(self, n):
        if n == 0:
            return 0
        end = self.pos + n
        if end > len(self.bits):
            raise FormatError("entropy-coded segment ended early")
        v = int(self.bits[self.pos:end], 2)
        self.pos = end
        return v

    def symbol(self, lookup):
        bits = self.bits
        pos = self.pos
        for length in range(1, 17):
            sym = lookup.get(bits[pos:pos + length])
            if sym is not None:
                self.pos = pos + length
                return sym
        raise FormatError("invalid Huffman code in scan")


def _extend(v, size):
    if size and v < (1 << (size - 1)):
        v -= (1 << size) - 1
    return v


def _lookup(bits, values):
    return {format(code, f"0{length}b"): sym for sym, (code, length) in huffman_codes(bits, values).items()}


def _unstuff(data, start):
    """Collect entropy-coded bytes from ``start``; returns (chunks split at RST, end offset)."""
    chunks = [bytearray()]
    i = start
    n = len(data)
    while i < n:
        b = data[i]
        if b != 0xFF:
            chunks[-1].append(b)
            i += 1
            continue
        if i + 1 >= n:
            raise FormatError("truncated JPEG stream")
        nxt = data[i + 1]
        if nxt == 0x00:
            chunks[-1].append(0xFF)
            i += 2
        elif 0xD0 <= nxt <= 0xD7:
            chunks.append(bytearray())
            i += 2
        elif nxt == 0xFF:
            i += 1
        else:
            return chunks, i
    raise FormatError("missing EOI marker")


def decode(data):
    """Decode a baseline JPEG byte string into an (H, W, 3) uint8 RGB array."""
    data = bytes(data)
    if data[:2] != b"\xff\xd8":
        raise FormatError("not a JPEG stream (missing SOI)")
    qtables = {}
    huff = {}
    frame = None
    restart = 0
    i = 2
    while i < len(data):
        if data[i] != 0xFF:
            raise FormatError(f"expected marker at offset {i}")
        marker = data[i + 1]
        if marker == 0xFF:
            i += 1
            continue
        if marker == 0xD9:
            break
        if i + 4 > len(data):
            raise FormatError("truncated JPEG stream")
        (length,) = struct.unpack(">H", data[i + 2:i + 4])
        payload = data[i + 4:i + 2 + length]
        if len(payload) != length - 2:
            raise FormatError("truncated JPEG segment")
        i += 2 + length
        if marker == 0xDB:
            j = 0
            while j < len(payload):
                pq, tq = payload[j] >> 4, payload[j] & 15
                if pq != 0:
                    raise FormatError("only 8-bit quantization tables are supported")
                table = np.zeros(64, dtype=np.int64)
                table[ZIGZAG] = np.frombuffer(payload[j + 1:j + 65], dtype=np.uint8)
                qtables[tq] = table.reshape(8, 8)
                j += 65
        elif marker == 0xC4:
            j = 0
            while j < len(payload):
                tc, th = payload[j] >> 4, payload[j] & 15
                bits = list(payload[j + 1:j + 17])
                total = sum(bits)
                values = list(payload[j + 17:j + 17 + total])
                huff[(tc, th)] = _lookup(bits, values)
                j += 17 + total
        elif marker == 0xC0 or marker == 0xC1:
            precision, h, w, nc = struct.unpack(">BHHB", payload[:6])
            if precision != 8:
                raise FormatError("only 8-bit samples are supported")
            comps = []
            for k in range(nc):
                cid, samp, tq = payload[6 + 3 * k:9 + 3 * k]
                comps.append({"id": cid, "h": samp >> 4, "v": samp & 15, "tq": tq})
            frame = (h, w, comps)
        elif 0xC2 <= marker <= 0xCF and marker not in (0xC4, 0xC8, 0xCC):
            raise FormatError(f"unsupported JPEG process (SOF{marker - 0xC0})")
        elif marker == 0xDD:
            (restart,) = struct.unpack(">H", payload[:2])
        elif marker == 0xDA:
            if frame is None:
                raise FormatError("scan before frame header")
            chunks, i = _unstuff(data, i)
            return _decode_frame(frame, payload, chunks, qtables, huff, restart)
    raise FormatError("no scan found in JPEG stream")


def _decode_frame(frame, sos, chunks, qtables, huff, restart):
    h, w, comps = frame
    ns = sos[0]
    if ns != len(comps):
        raise FormatError("only single-scan interleaved streams are supported")
    by_id = {c["id"]: c for c in comps}
    for k in range(ns):
        cid, tables = sos[1 + 2 * k], sos[2 + 2 * k]
        by_id[cid]["td"], by_id[cid]["ta"] = tables >> 4, tables & 15
    hmax = max(c["h"] for c in comps)
    vmax = max(c["v"] for c in comps)
    mcux = -(-w // (8 * hmax))
    mcuy = -(-h // (8 * vmax))
    if len(comps) == 1:
        # A non-interleaved scan walks the component's own block grid.
        c = comps[0]
        bw = -(-(-(-w * c["h"] // hmax)) // 8)
        bh = -(-(-(-h * c["v"] // vmax)) // 8)
        layout = [[(c, by, bx)] for by in range(bh) for bx in range(bw)]
        grids = {c["id"]: (bh, bw)}
    else:
        layout = []
        for my in range(mcuy):
            for mx in range(mcux):
                units = []
                for c in comps:
                    for v in range(c["v"]):
                        for u in range(c["h"]):
                            units.append((c, my * c["v"] + v, mx * c["h"] + u))
                layout.append(units)
        grids = {c["id"]: (mcuy * c["v"], mcux * c["h"]) for c in comps}
    coefs = {cid: np.zeros(grid + (64,), dtype=np.int64) for cid, grid in grids.items()}

    chunk_idx = 0
    reader = _BitReader(chunks[0])
    preds = {c["id"]: 0 for c in comps}
    for n, units in enumerate(layout):
        if restart and n and n % restart == 0:
            chunk_idx += 1
            if chunk_idx >= len(chunks):
                raise FormatError("missing restart marker")
            reader = _BitReader(chunks[chunk_idx])
            preds = {c["id"]: 0 for c in comps}
        for c, by, bx in units:
            try:
                dc_table = huff[(0, c["td"])]
                ac_table = huff[(1, c["ta"])]
            except KeyError:
                raise FormatError("scan references an undefined Huffman table") from None
            block = coefs[c["id"]][by, bx]
            size = reader.symbol(dc_table)
            preds[c["id"]] += _extend(reader.read(size), size)
            block[0] = preds[c["id"]]
            k = 1
            while k < 64:
                rs = reader.symbol(ac_table)
                run, size = rs >> 4, rs & 15
                if size == 0:
                    if run == 15:
                        k += 16
                        continue
                    break
                k += run
                if k > 63:
                    raise FormatError("AC coefficient index out of range")
                block[k] = _extend(reader.read(size), size)
                k += 1

    planes = []
    for c in comps:
        if c["tq"] not in qtables:
            raise FormatError("frame references an undefined quantization table")
        q = qtables[c["tq"]]
        zz = coefs[c["id"]]
        gh, gw = zz.shape[:2]
        nat = np.zeros_like(zz)
        nat[..., ZIGZAG] = zz
        freq = nat.reshape(gh, gw, 8, 8) * q
        spatial = DCT.T @ freq @ DCT
        plane = spatial.transpose(0, 2, 1, 3).reshape(gh * 8, gw * 8) + 128.0
        plane = np.clip(np.round(plane), 0, 255)
        sy, sx = vmax // c["v"], hmax // c["h"]
        if sy > 1 or sx > 1:
            plane = np.repeat(np.repeat(plane, sy, axis=0), sx, axis=1)
        planes.append(plane[:h, :w])
    if len(planes) == 1:
        gray = planes[0].astype(np.uint8)
        return np.stack([gray, gray, gray], axis=-1)
    rgb = ycbcr_to_rgb(np.stack(planes, axis=-1))
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8)


def roundtrip(rgb, quality):
    return decode(encode(rgb, quality))
