"""NPZ archive reader/writer.

Archives are ZIP containers of ``<name>.npy`` entries in NPY format 1.0.
Entries are written stored (uncompressed) with a fixed timestamp so equal
inputs give byte-identical files; deflated entries are accepted on read.
Non-``.npy`` entries may carry UTF-8 text (e.g. ``spec.json``).
"""
import ast
import struct
import zipfile

import numpy as np

MAGIC = b"\x93NUMPY"
ALIGN = 64
SUPPORTED_DESCR = {"<f8": np.dtype("<f8"), "<f4": np.dtype("<f4")}
_EPOCH = (1980, 1, 1, 0, 0, 0)


class NpzFormatError(ValueError):
    pass


def _check_name(name):
    if not name or "/" in name or not name.isascii():
        raise ValueError(f"invalid record name {name!r}: must be non-empty ASCII without '/'")


def encode_npy(array):
    """Serialize one array as an NPY 1.0 record."""
    arr = np.asarray(array)
    descr = "<f4" if arr.dtype == np.float32 else "<f8"
    arr = arr.astype(SUPPORTED_DESCR[descr], copy=False)
    if arr.ndim == 1:
        shape = f"({arr.shape[0]},)"
    else:
        shape = "(" + ", ".join(str(n) for n in arr.shape) + ")"
    header = f"{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape}, }}"
    # magic(6) + version(2) + header length(2) + header + '\n' is 64-byte aligned
    pad = -(len(MAGIC) + 4 + len(header) + 1) % ALIGN
    header = header + " " * pad + "\n"
    return MAGIC + bytes([1, 0]) + struct.pack("<H", len(header)) + header.encode("latin1") + arr.tobytes(order="C")


def decode_npy(data, entry="<npy>"):
    if len(data) < 10 or data[:6] != MAGIC:
        raise NpzFormatError(f"{entry}: bad magic bytes")
    if data[6:8] != bytes([1, 0]):
        raise NpzFormatError(f"{entry}: unsupported NPY version {data[6]}.{data[7]}")
    (hlen,) = struct.unpack("<H", data[8:10])
    if len(data) < 10 + hlen:
        raise NpzFormatError(f"{entry}: truncated header")
    try:
        header = ast.literal_eval(data[10 : 10 + hlen].decode("latin1"))
    except (SyntaxError, ValueError) as exc:
        raise NpzFormatError(f"{entry}: unparseable header ({exc})") from None
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise NpzFormatError(f"{entry}: header must hold exactly descr, fortran_order, shape")
    descr, fortran, shape = header["descr"], header["fortran_order"], header["shape"]
    if descr not in SUPPORTED_DESCR:
        raise NpzFormatError(f"{entry}: unsupported descr {descr!r}")
    if fortran is not False:
        raise NpzFormatError(f"{entry}: fortran_order arrays are not supported")
    if not isinstance(shape, tuple) or not all(isinstance(n, int) and n >= 0 for n in shape):
        raise NpzFormatError(f"{entry}: bad shape {shape!r}")
    dtype = SUPPORTED_DESCR[descr]
    count = int(np.prod(shape)) if shape else 1
    body = data[10 + hlen :]
    if len(body) != count * dtype.itemsize:
        raise NpzFormatError(f"{entry}: expected {count * dtype.itemsize} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=dtype).reshape(shape).copy()


def write_npz(records, path, text_records=None):
    """Write ``{name: array}`` (and optional ``{name: str}`` text) to ``path``."""
    for name in records:
        _check_name(name)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, array in records.items():
            _write_entry(zf, f"{name}.npy", encode_npy(array))
        for name, text in (text_records or {}).items():
            _check_name(name)
            _write_entry(zf, name, text.encode("utf-8"))


def _write_entry(zf, name, payload):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def read_npz_archive(path):
    """Return ``(arrays, texts)`` from an archive."""
    arrays, texts = {}, {}
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise NpzFormatError(f"{path}: not a ZIP archive ({exc})") from None
    with zf:
        for info in zf.infolist():
            try:
                data = zf.read(info)
            except (zipfile.BadZipFile, EOFError, OSError) as exc:
                raise NpzFormatError(f"{path}:{info.filename}: unreadable entry ({exc})") from None
            if info.filename.endswith(".npy"):
                arrays[info.filename[:-4]] = decode_npy(data, f"{path}:{info.filename}")
            else:
                texts[info.filename] = data.decode("utf-8")
    return arrays, texts


def read_npz(path):
    return read_npz_archive(path)[0]
