"""JSON-header + raw little-endian payload container.

Layout: one line of JSON (UTF-8, terminated by LF) followed by the arrays
listed in ``header["arrays"]``, each written row-major in declaration
order.
"""

import json

import numpy as np

MAGIC = "extractbench-bin/1"


def write(path, meta, arrays):
    specs, blobs = [], []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        arr = arr.astype(dt.newbyteorder("<") if dt.byteorder == "=" else dt, copy=False)
        specs.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        blobs.append(arr.tobytes(order="C"))
    header = {"magic": MAGIC, **meta, "arrays": specs}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for b in blobs:
            fh.write(b)


def read(path):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("magic") != MAGIC:
            raise ValueError(f"{path}: not an {MAGIC} file")
        arrays = {}
        for spec in header["arrays"]:
            dt = np.dtype(spec["dtype"])
            count = int(np.prod(spec["shape"], dtype=np.int64))
            buf = fh.read(count * dt.itemsize)
            if len(buf) != count * dt.itemsize:
                raise ValueError(f"{path}: truncated payload for {spec['name']}")
            arrays[spec["name"]] = np.frombuffer(buf, dtype=dt).reshape(spec["shape"]).copy()
    meta = {k: v for k, v in header.items() if k not in ("magic", "arrays")}
    return meta, arrays
