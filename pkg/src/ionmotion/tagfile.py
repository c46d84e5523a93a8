"""Native binary time-tag file format.

Layout (all little-endian):

    8 bytes   magic "IONTAG01"
    u16       format version (currently 1)
    u32       timestamp resolution in picoseconds
    u8        detector channel count (channel 255 is the trigger marker)
    u32       metadata length, followed by that many bytes of UTF-8 JSON
    records   u64 timestamp + u8 channel, 9 bytes each, sorted by timestamp

Files are written and read in bounded chunks so arbitrarily large
streams never have to fit in memory at once.
"""

import json
import struct

import numpy as np

from .simulator import TRIGGER_CHANNEL, TagStream

MAGIC = b"IONTAG01"
VERSION = 1
RECORD_DTYPE = np.dtype([("t", "<u8"), ("ch", "u1")])
_HEAD = struct.Struct("<HIB I")  # version, resolution_ps, channels, meta length

DEFAULT_CHUNK = 1 << 20  # records per I/O chunk


class FormatError(ValueError):
    """File is not a valid tag file."""


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def write_tagfile(path, stream, chunk=DEFAULT_CHUNK):
    """Write a TagStream; returns the number of records written."""
    meta = _json_safe(dict(stream.meta))
    meta["duration_s"] = float(stream.duration)
    if stream.warning:
        meta["warning"] = stream.warning
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    resolution_ps = int(round(stream.timestamp_resolution * 1e12))
    channels = stream.detector_channels()
    n_channels = (max(channels) + 1) if channels else 0
    n = stream.n_records
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEAD.pack(VERSION, resolution_ps, n_channels, len(blob)))
        fh.write(blob)
        for a in range(0, n, chunk):
            b = min(a + chunk, n)
            rec = np.empty(b - a, dtype=RECORD_DTYPE)
            rec["t"] = stream.timestamps[a:b].astype(np.uint64)
            rec["ch"] = stream.channels[a:b]
            rec.tofile(fh)
    return n


class TagFileReader:
    """Streaming reader; use as a context manager or call read_all()."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "rb")
        try:
            magic = self._fh.read(len(MAGIC))
            if magic != MAGIC:
                raise FormatError(f"{path}: bad magic {magic!r}")
            head = self._fh.read(_HEAD.size)
            if len(head) != _HEAD.size:
                raise FormatError(f"{path}: truncated header")
            version, self.resolution_ps, self.n_channels, meta_len = \
                _HEAD.unpack(head)
            if version != VERSION:
                raise FormatError(f"{path}: unsupported version {version}")
            blob = self._fh.read(meta_len)
            if len(blob) != meta_len:
                raise FormatError(f"{path}: truncated metadata")
            self.meta = json.loads(blob.decode("utf-8")) if meta_len else {}
            self._data_start = self._fh.tell()
            self._fh.seek(0, 2)
            payload = self._fh.tell() - self._data_start
            if payload % RECORD_DTYPE.itemsize:
                raise FormatError(f"{path}: truncated record section")
            self.n_records = payload // RECORD_DTYPE.itemsize
            self._fh.seek(self._data_start)
        except Exception:
            self._fh.close()
            raise

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        self._fh.close()

    def iter_chunks(self, chunk=DEFAULT_CHUNK):
        """Yield (timestamps int64, channels uint8) arrays in file order."""
        self._fh.seek(self._data_start)
        remaining = self.n_records
        last = None
        while remaining > 0:
            take = min(chunk, remaining)
            rec = np.fromfile(self._fh, dtype=RECORD_DTYPE, count=take)
            if rec.size != take:
                raise FormatError(f"{self.path}: short read in record section")
            ts = rec["t"].astype(np.int64)
            if np.any(np.diff(ts) < 0) or (last is not None and ts.size
                                           and ts[0] < last):
                raise FormatError(f"{self.path}: records not sorted")
            if ts.size:
                last = ts[-1]
            remaining -= take
            yield ts, rec["ch"].copy()

    def read_all(self, chunk=DEFAULT_CHUNK):
        """Load the whole file into a TagStream."""
        parts_t = []
        parts_c = []
        for ts, ch in self.iter_chunks(chunk):
            parts_t.append(ts)
            parts_c.append(ch)
        if parts_t:
            t = np.concatenate(parts_t)
            c = np.concatenate(parts_c)
        else:
            t = np.empty(0, dtype=np.int64)
            c = np.empty(0, dtype=np.uint8)
        meta = dict(self.meta)
        duration = float(meta.pop("duration_s", 0.0))
        warning = meta.pop("warning", "")
        return TagStream(
            timestamps=t, channels=c, duration=duration,
            timestamp_resolution=self.resolution_ps * 1e-12,
            meta=meta, warning=warning,
        )


def read_tagfile(path):
    with TagFileReader(path) as reader:
        return reader.read_all()


def import_vendor_tcspc(path):
    """Extension point for vendor TCSPC formats (PicoHarp .ptu and friends).

    Conversion into the native format is intentionally out of scope here;
    plug a converter in by producing a TagStream and calling write_tagfile.
    """
    raise NotImplementedError(
        "vendor TCSPC import is a stub; convert to the IONTAG01 format "
        "with write_tagfile()")
