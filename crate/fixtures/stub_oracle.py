#!/usr/bin/env python3
"""Independent oracle for the stub backends.

Builds the `book_read` fixture (clip container + config) and writes the
expected ConversationTurn JSON by composing the stub rules directly:
FNV-1a fingerprints, splitmix64 noise, header-row payloads, stored-deflate
PNG, hashed bag-of-words embeddings and cosine argmax. Shares no code with
the Rust crates.

Usage: python3 fixtures/stub_oracle.py [--check]
"""
import base64
import json
import math
import struct
import sys
import zlib
from pathlib import Path

HERE = Path(__file__).resolve().parent
VOCAB = (HERE.parent / "crates/core/src/stubs/vocabulary.txt").read_text().split()
MASK = (1 << 64) - 1

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & MASK
    return h


def splitmix_stream(state: int):
    while True:
        state = (state + 0x9E3779B97F4A7C15) & MASK
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        yield z ^ (z >> 31)


def png_stored(width: int, height: int, rgb: bytes) -> bytes:
    raw = bytearray()
    for y in range(height):
        raw.append(0)
        raw += rgb[y * width * 3:(y + 1) * width * 3]
    raw = bytes(raw)
    z = bytearray(b"\x78\x01")
    pos = 0
    while True:
        chunk = raw[pos:pos + 65535]
        pos += len(chunk)
        final = 1 if pos >= len(raw) else 0
        z.append(final)
        z += struct.pack("<HH", len(chunk), len(chunk) ^ 0xFFFF)
        z += chunk
        if final:
            break
    z += struct.pack(">I", zlib.adler32(raw) & 0xFFFFFFFF)

    def chunk_bytes(kind: bytes, data: bytes) -> bytes:
        return (struct.pack(">I", len(data)) + kind + data
                + struct.pack(">I", zlib.crc32(kind + data) & 0xFFFFFFFF))

    ihdr = struct.pack(">IIBBBBB", width, height, 8, 2, 0, 0, 0)
    return (b"\x89PNG\r\n\x1a\n" + chunk_bytes(b"IHDR", ihdr)
            + chunk_bytes(b"IDAT", bytes(z)) + chunk_bytes(b"IEND", b""))


def synth_image(prompt: str, seed: int, i: int, width: int, height: int) -> bytes:
    n = width * height * 3
    buf = bytearray()
    for word in splitmix_stream(seed ^ i ^ fnv1a(prompt.encode())):
        buf += struct.pack("<Q", word)
        if len(buf) >= n:
            break
    buf = buf[:n]
    payload = f"{prompt}|k={i}".encode()
    header = b"MGCT" + struct.pack(">I", len(payload)) + payload
    buf[:len(header)] = header
    return bytes(buf)


def caption_for(rgb: bytes) -> str:
    if rgb[:4] != b"MGCT":
        return "an unrecognized picture"
    (n,) = struct.unpack(">I", rgb[4:8])
    text = rgb[8:8 + n].decode()
    prompt, _, idx = text.rpartition("|k=")
    return f"a photo of {prompt}" if int(idx) == 0 else f"a photo of {prompt} variant {idx}"


def embed(text: str, dim: int = 64):
    v = [0.0] * dim
    for tok in text.lower().split():
        h = fnv1a(tok.encode())
        v[h % dim] += -1.0 if (h >> 63) & 1 else 1.0
    return v


def cosine(u, v):
    dot = 0.0
    for a, b in zip(u, v):
        dot += a * b
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(b * b for b in v))
    return max(-1.0, min(1.0, dot / (nu * nv)))


# --- fixture -----------------------------------------------------------------

FRAME_W = FRAME_H = 32
WINDOW = 16
FPS = 25
SEED = 7
K = 2
RES = (384, 384)
SIGNS = ["book", "read"]


def held_sign_frame(label: str) -> bytes:
    """A flat grey frame whose nonce pixel makes the stub recognizer see `label`."""
    target = VOCAB.index(label)
    for nonce in range(1 << 24):
        frame = bytearray([128] * (FRAME_W * FRAME_H * 3))
        frame[0:3] = bytes([nonce & 0xFF, (nonce >> 8) & 0xFF, (nonce >> 16) & 0xFF])
        if fnv1a(bytes(frame)) % len(VOCAB) == target:
            return bytes(frame)
    raise RuntimeError(label)


def build_fixture():
    frames = []
    for label in SIGNS:
        frames += [held_sign_frame(label)] * WINDOW
    clip = (b"MCLP" + bytes([1]) + struct.pack(">HHHI", FRAME_W, FRAME_H, FPS, len(frames))
            + b"".join(frames))
    conf = (
        "# book_read fixture: two held signs, one window each\n"
        f"window_len = {WINDOW}\n"
        f"stride = {WINDOW}\n"
        f"k = {K}\n"
        f"width = {RES[0]}\n"
        f"height = {RES[1]}\n"
        f"seed = {SEED}\n"
    )
    return clip, conf


def build_turn():
    keywords = SIGNS
    accepted_at = [f"book_read#{j * WINDOW}" for j in range(len(SIGNS))]
    query = " ".join(k.lower() for k in keywords)
    request_id = "turn-1"
    request = {"request_id": request_id, "prompt": query, "steps": 20,
               "width": RES[0], "height": RES[1], "k": K, "seed": SEED}
    q_emb = embed(query)
    candidates = []
    scores = []
    for i in range(K):
        rgb = synth_image(query, SEED, i, *RES)
        image_id = f"{request_id}/{i}"
        cap = caption_for(rgb)
        emb = embed(cap)
        s = cosine(emb, q_emb)
        scores.append(s)
        candidates.append({
            "image": {"image_id": image_id, "request_ref": request_id, "ordinal": i,
                      "png_bytes": base64.b64encode(png_stored(*RES, rgb)).decode()},
            "caption": {"image_ref": image_id, "text": cap},
            "caption_embedding": {"vector": emb, "dim": 64},
            "score": s,
        })
    best = max(scores)
    sel = scores.index(best)
    turn = {
        "turn_id": 1,
        "keywords": {"keywords": keywords, "accepted_at": accepted_at},
        "query_text": query,
        "request": request,
        "candidates": candidates,
        "selection": {"selected_index": sel, "selected_image": f"{request_id}/{sel}",
                      "selected_caption": candidates[sel]["caption"]["text"],
                      "scores": scores},
        "stage_timings_ms": {"recognize": 0.0, "synthesize": 0.0, "caption": 0.0,
                             "embed": 0.0, "select": 0.0},
        "override": None,
    }
    return json.dumps(turn, separators=(",", ":"), ensure_ascii=False) + "\n"


def main():
    clip, conf = build_fixture()
    golden = build_turn()
    outputs = {
        HERE / "book_read.mclip": clip,
        HERE / "book_read.conf": conf.encode(),
        HERE / "book_read.golden.json": golden.encode(),
    }
    check = "--check" in sys.argv
    for path, data in outputs.items():
        if check:
            if path.read_bytes() != data:
                sys.exit(f"stale fixture: {path.name}")
        else:
            path.write_bytes(data)
    # values frozen into the Rust unit tests
    zero = bytes(16 * 16 * 3)
    print("fnv1a(zero 16x16 frame) =", hex(fnv1a(zero)), "->", VOCAB[fnv1a(zero) % len(VOCAB)])
    hb = fnv1a(b"book")
    print("fnv1a(book) =", hex(hb), "idx", hb % 64, "sign", -1 if hb >> 63 else 1)
    print("fnv1a('') =", hex(fnv1a(b"")), "fnv1a('a') =", hex(fnv1a(b"a")))
    print("splitmix64(0) first =", hex(next(splitmix_stream(0))))
    print("scores", json.loads(golden)["selection"]["scores"])


if __name__ == "__main__":
    main()
