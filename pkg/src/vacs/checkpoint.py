"""Versioned binary container for named float64 tensors plus JSON metadata.

Layout: magic line ``VACSCKPT <version>\\n``, an 8-byte little-endian header
length, the UTF-8 JSON header, then raw little-endian float64 tensor data
in header order. No timestamps are written, so equal inputs give equal bytes.
"""
import hashlib
import json
import struct

import numpy as np

MAGIC = b"VACSCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors, meta):
    names = sorted(tensors)
    index, offset, blobs = [], 0, []
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta, "tensors": index}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    return b"".join([MAGIC, b" %d\n" % VERSION, struct.pack("<Q", len(header)), header, *blobs])


def loads(buf):
    line_end = buf.find(b"\n")
    if line_end < 0 or not buf.startswith(MAGIC):
        raise CheckpointError("not a VACS checkpoint")
    version = int(buf[len(MAGIC):line_end])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = line_end + 1
    (hlen,) = struct.unpack("<Q", buf[pos:pos + 8])
    pos += 8
    header = json.loads(buf[pos:pos + hlen].decode("utf-8"))
    base = pos + hlen
    tensors = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        start = base + t["offset"]
        tensors[t["name"]] = np.frombuffer(buf, dtype="<f8", count=n,
                                           offset=start).reshape(t["shape"]).astype(np.float64)
    return tensors, header["meta"]


def save(path, tensors, meta):
    data = dumps(tensors, meta)
    with open(path, "wb") as f:
        f.write(data)
    return hashlib.sha256(data).hexdigest()


def load(path):
    with open(path, "rb") as f:
        return loads(f.read())


def digest(tensors, meta):
    return hashlib.sha256(dumps(tensors, meta)).hexdigest()
