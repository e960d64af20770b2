"""Append-only binary store of episode records.

Layout of ``episodes.bin`` (all integers little-endian)::

    header   b"RSEPISOD" u32 version u32 n_areas u32 horizon u32 reserved
             i64 area_totals[n_areas]
    record*  u32 nbytes, zlib(payload)
    index    u64 offset[count]            (offset of each record's u32 prefix)
    footer   b"RSINDEX\\0" u64 index_offset u64 count

    payload  u64 episode_index u64 scenario_seed u32 duration
             u32 n_failures u32 n_repairs u32 n_hours
             i64 failures[n_failures][2]  (edge, storm hour)
             i64 repairs[n_repairs][2]    (edge, completion hour)
             u8  area_gust[n_areas]
             i64 served[n_areas][n_hours] (customers served, hours 0..n_hours-1)

Reopening a store for append drops the index and footer and rewrites them
on close.
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .simulation import EpisodeRecord

MAGIC = b"RSEPISOD"
INDEX_MAGIC = b"RSINDEX\x00"
VERSION = 1
_HEAD = struct.Struct("<4I")
_REC = struct.Struct("<QQ4I")
_FOOT = struct.Struct("<8sQQ")


class EpisodeStore:
    def __init__(self, path, area_totals, horizon, offsets, fh, writable):
        self.path = Path(path)
        self.area_totals = np.asarray(area_totals, dtype=np.int64)
        self.horizon = int(horizon)
        self._offsets = offsets
        self._fh = fh
        self._writable = writable
        self._end = None

    @classmethod
    def create(cls, path, area_totals, horizon):
        totals = np.asarray(area_totals, dtype="<i8")
        fh = open(path, "w+b")
        fh.write(MAGIC + _HEAD.pack(VERSION, len(totals), int(horizon), 0) + totals.tobytes())
        store = cls(path, totals, horizon, [], fh, True)
        store._end = fh.tell()
        return store

    @classmethod
    def open(cls, path, mode="r"):
        fh = open(path, "r+b" if mode == "a" else "rb")
        head = fh.read(8 + _HEAD.size)
        if head[:8] != MAGIC:
            raise ValueError(f"{path}: not an episode store")
        version, n_areas, horizon, _ = _HEAD.unpack(head[8:])
        if version != VERSION:
            raise ValueError(f"{path}: unsupported store version {version}")
        totals = np.frombuffer(fh.read(8 * n_areas), dtype="<i8").copy()
        fh.seek(-_FOOT.size, 2)
        magic, index_off, count = _FOOT.unpack(fh.read(_FOOT.size))
        if magic != INDEX_MAGIC:
            raise ValueError(f"{path}: missing index (store not closed?)")
        fh.seek(index_off)
        offsets = np.frombuffer(fh.read(8 * count), dtype="<u8").astype(np.int64).tolist()
        store = cls(path, totals, horizon, offsets, fh, mode == "a")
        if mode == "a":
            fh.truncate(index_off)
            store._end = index_off
        return store

    def __len__(self):
        return len(self._offsets)

    def append(self, rec: EpisodeRecord):
        if not self._writable:
            raise IOError("store opened read-only")
        fails = np.ascontiguousarray(rec.failures, dtype="<i8").reshape(-1, 2)
        reps = np.ascontiguousarray(rec.repairs, dtype="<i8").reshape(-1, 2)
        served = np.ascontiguousarray(rec.served, dtype="<i8")
        payload = b"".join([
            _REC.pack(rec.episode_index, rec.scenario_seed, rec.duration, len(fails), len(reps),
                      served.shape[1]),
            fails.tobytes(), reps.tobytes(),
            np.asarray(rec.area_gust, dtype="u1").tobytes(), served.tobytes(),
        ])
        blob = zlib.compress(payload, 6)
        self._fh.seek(self._end)
        self._offsets.append(self._end)
        self._fh.write(struct.pack("<I", len(blob)) + blob)
        self._end = self._fh.tell()

    def __getitem__(self, k) -> EpisodeRecord:
        off = self._offsets[k]
        self._fh.seek(off)
        (n,) = struct.unpack("<I", self._fh.read(4))
        return self._decode(zlib.decompress(self._fh.read(n)))

    def __iter__(self):
        for k in range(len(self)):
            yield self[k]

    def _decode(self, buf) -> EpisodeRecord:
        idx, seed, dur, nf, nr, nh = _REC.unpack_from(buf, 0)
        off = _REC.size
        a = len(self.area_totals)

        def take(dt, count):
            nonlocal off
            arr = np.frombuffer(buf, dtype=dt, count=count, offset=off)
            off += arr.nbytes
            return arr

        fails = take("<i8", 2 * nf).reshape(-1, 2).astype(np.int64)
        reps = take("<i8", 2 * nr).reshape(-1, 2).astype(np.int64)
        gust = take("u1", a).astype(bool)
        served = take("<i8", a * nh).reshape(a, nh).astype(np.int64)
        return EpisodeRecord(int(idx), int(seed), int(dur), fails, reps, served,
                             self.area_totals.copy(), gust, self.horizon)

    def close(self):
        if self._fh is None:
            return
        if self._writable:
            self._fh.seek(self._end)
            index_off = self._end
            self._fh.write(np.asarray(self._offsets, dtype="<u8").tobytes())
            self._fh.write(_FOOT.pack(INDEX_MAGIC, index_off, len(self._offsets)))
            self._fh.truncate()
        self._fh.close()
        self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
