"""Box-phrase similarity providers.

Two implementations share the ``similarity(image, box, phrase)`` contract:

* :class:`SyntheticProvider`, an exact oracle over symbolic scenes. The ROI
  vector holds, per class, the fraction of the box covered by that class;
  prototypes are one-hot, so the cosine is ``w[phrase] / ||w||``.
* :class:`ExternalProvider`, a client for an out-of-process scorer speaking
  newline-delimited JSON over a TCP socket or a child process's stdio.
"""

from __future__ import annotations

import itertools
import json
import math
import socket
import subprocess
import threading
from dataclasses import dataclass
from typing import BinaryIO, Optional, Protocol, Sequence

import numpy as np

from ssgrpo.core import BBox, ImageRef, box_area, box_intersection
from ssgrpo.errors import (
    ProtocolError,
    ProviderTimeout,
    ProviderUnavailable,
    RemoteError,
)
from ssgrpo.synth import Scene, phrase_class

DEFAULT_TIMEOUT = 10.0


class SimilarityProvider(Protocol):
    def similarity(self, image: ImageRef, box: BBox, phrase: str) -> float:
        ...


def union_area(rects: Sequence[BBox]) -> int:
    """Area covered by the union of axis-aligned rectangles."""
    rects = [r for r in rects if box_area(r) > 0]
    if not rects:
        return 0
    xs = sorted({v for r in rects for v in (r.x1, r.x2)})
    ys = sorted({v for r in rects for v in (r.y1, r.y2)})
    xi = {v: i for i, v in enumerate(xs)}
    yi = {v: i for i, v in enumerate(ys)}
    covered = np.zeros((len(ys) - 1, len(xs) - 1), dtype=bool)
    for r in rects:
        covered[yi[r.y1]:yi[r.y2], xi[r.x1]:xi[r.x2]] = True
    cell = np.outer(np.diff(ys), np.diff(xs))
    return int(cell[covered].sum())


def class_coverage(scene: Scene, box: BBox) -> dict[str, float]:
    """Fraction of ``box`` covered by each class (union per class)."""
    area = box_area(box)
    weights = {}
    for cls in scene.classes:
        pieces = [box_intersection(box, r) for r in scene.rects_of(cls)]
        covered = union_area([p for p in pieces if p is not None])
        weights[cls] = covered / area if area else 0.0
    return weights


def synthetic_similarity(scene: Scene, box: BBox, phrase: str) -> float:
    cls = phrase_class(phrase, scene.classes)
    if cls is None or box_area(box) == 0:
        return 0.0
    w = class_coverage(scene, box)
    norm = math.sqrt(sum(v * v for v in w.values()))
    if norm == 0.0:
        return 0.0
    return w[cls] / norm


class SyntheticProvider:
    """Frozen oracle scorer for synthetic-scene images."""

    def similarity(self, image: ImageRef, box: BBox, phrase: str) -> float:
        if image.kind != ImageRef.SYNTHETIC:
            raise ProviderUnavailable(
                f"synthetic provider cannot score {image.kind} image {image.path!r}"
            )
        return synthetic_similarity(image.scene, box, phrase)


# --- wire format ---------------------------------------------------------


@dataclass(frozen=True)
class SimilarityRequest:
    id: str
    image: str
    box: BBox
    phrase: str

    def to_line(self) -> bytes:
        payload = {"id": self.id, "image": self.image, "box": self.box.to_list(), "phrase": self.phrase}
        return (json.dumps(payload, ensure_ascii=False, separators=(",", ":")) + "\n").encode("utf-8")

    @classmethod
    def from_line(cls, line: bytes | str) -> "SimilarityRequest":
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        d = json.loads(line)
        return cls(id=d["id"], image=d["image"], box=BBox.of(d["box"]), phrase=d["phrase"])


@dataclass(frozen=True)
class SimilarityResponse:
    id: str
    similarity: Optional[float] = None
    error: Optional[str] = None

    def to_line(self) -> bytes:
        payload: dict = {"id": self.id}
        if self.error is not None:
            payload["error"] = self.error
        else:
            payload["similarity"] = self.similarity
        return (json.dumps(payload, ensure_ascii=False, separators=(",", ":")) + "\n").encode("utf-8")

    @classmethod
    def from_line(cls, line: bytes | str) -> "SimilarityResponse":
        """Parse and validate one response line, raising ProtocolError if malformed."""
        try:
            if isinstance(line, bytes):
                line = line.decode("utf-8")
            d = json.loads(line)
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ProtocolError(f"malformed response line: {exc}") from exc
        if not isinstance(d, dict) or not isinstance(d.get("id"), str):
            raise ProtocolError(f"response without string id: {line!r}")
        if "error" in d:
            return cls(id=d["id"], error=str(d["error"]))
        sim = d.get("similarity")
        if isinstance(sim, bool) or not isinstance(sim, (int, float)):
            exc = ProtocolError(f"response {d['id']!r} has no numeric similarity")
        elif not (-1.0 <= sim <= 1.0):
            exc = ProtocolError(f"similarity {sim} outside [-1, 1] for request {d['id']!r}")
        else:
            return cls(id=d["id"], similarity=float(sim))
        exc.request_id = d["id"]
        raise exc


# --- transports ----------------------------------------------------------


class Stream:
    """A duplex byte stream: one reader, one writer, one close."""

    def __init__(self, reader: BinaryIO, writer: BinaryIO, closer=None):
        self.reader = reader
        self.writer = writer
        self._closer = closer

    def close(self) -> None:
        # unblock the reader thread first; closing a buffered reader that
        # another thread is blocked on would deadlock on its internal lock
        if self._closer is not None:
            self._closer()
        for f in (self.writer, self.reader):
            try:
                f.close()
            except (OSError, ValueError):
                pass


def tcp_stream(host: str, port: int, connect_timeout: float = DEFAULT_TIMEOUT) -> Stream:
    try:
        sock = socket.create_connection((host, port), timeout=connect_timeout)
    except OSError as exc:
        raise ProviderUnavailable(f"cannot connect to {host}:{port}: {exc}") from exc
    sock.settimeout(None)

    def stop():
        try:
            sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        sock.close()

    return Stream(sock.makefile("rb"), sock.makefile("wb"), stop)


def process_stream(argv: Sequence[str]) -> Stream:
    try:
        proc = subprocess.Popen(list(argv), stdin=subprocess.PIPE, stdout=subprocess.PIPE)
    except OSError as exc:
        raise ProviderUnavailable(f"cannot start scorer {argv!r}: {exc}") from exc

    def stop():
        try:
            proc.stdin.close()
        except (OSError, ValueError):
            pass
        proc.terminate()
        try:
            proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            proc.kill()

    return Stream(proc.stdout, proc.stdin, stop)


@dataclass(frozen=True)
class Endpoint:
    """Where an external scorer lives: ``tcp`` (host, port) or ``process`` (argv)."""

    kind: str
    host: str = "127.0.0.1"
    port: int = 0
    argv: tuple[str, ...] = ()
    timeout: float = DEFAULT_TIMEOUT

    def connect(self) -> Stream:
        if self.kind == "tcp":
            return tcp_stream(self.host, self.port, self.timeout)
        if self.kind == "process":
            return process_stream(self.argv)
        raise ValueError(f"unknown endpoint kind {self.kind!r}")


class _Pending:
    __slots__ = ("event", "response", "error")

    def __init__(self):
        self.event = threading.Event()
        self.response: Optional[SimilarityResponse] = None
        self.error: Optional[Exception] = None


class ExternalProvider:
    """NDJSON client with pipelined requests matched by id.

    Writes are serialized under a lock; a background thread reads response
    lines and hands each to the waiting caller with the same id.
    """

    def __init__(self, endpoint: Endpoint, stream: Optional[Stream] = None):
        self.endpoint = endpoint
        self.timeout = endpoint.timeout
        self._stream = stream if stream is not None else endpoint.connect()
        self._write_lock = threading.Lock()
        self._pending_lock = threading.Lock()
        self._pending: dict[str, _Pending] = {}
        self._ids = itertools.count()
        self._closed = False
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _fail_all(self, exc: Exception) -> None:
        with self._pending_lock:
            waiters = list(self._pending.values())
            self._pending.clear()
        for p in waiters:
            p.error = exc
            p.event.set()

    def _read_loop(self) -> None:
        try:
            for line in self._stream.reader:
                if not line.strip():
                    continue
                resp, err = None, None
                try:
                    resp = SimilarityResponse.from_line(line)
                    rid = resp.id
                except ProtocolError as exc:
                    err, rid = exc, getattr(exc, "request_id", None)
                with self._pending_lock:
                    waiter = self._pending.pop(rid, None) if rid is not None else None
                if waiter is None:
                    self._fail_all(err or ProtocolError(f"response id {rid!r} matches no request"))
                    continue
                waiter.response, waiter.error = resp, err
                waiter.event.set()
        except (OSError, ValueError):
            pass
        self._fail_all(ProviderUnavailable("scorer closed the connection"))

    def request(self, req: SimilarityRequest) -> float:
        if self._closed:
            raise ProviderUnavailable("provider is closed")
        waiter = _Pending()
        with self._pending_lock:
            if req.id in self._pending:
                raise ValueError(f"request id {req.id!r} already in flight")
            self._pending[req.id] = waiter
        try:
            with self._write_lock:
                self._stream.writer.write(req.to_line())
                self._stream.writer.flush()
        except (OSError, ValueError) as exc:
            with self._pending_lock:
                self._pending.pop(req.id, None)
            raise ProviderUnavailable(f"cannot write to scorer: {exc}") from exc
        if not waiter.event.wait(self.timeout):
            with self._pending_lock:
                self._pending.pop(req.id, None)
            raise ProviderTimeout(f"no response to {req.id!r} within {self.timeout} s")
        if waiter.error is not None:
            raise waiter.error
        resp = waiter.response
        if resp.error is not None:
            raise RemoteError(f"scorer error for {req.id!r}: {resp.error}")
        return resp.similarity

    def similarity(self, image: ImageRef, box: BBox, phrase: str) -> float:
        if image.kind != ImageRef.FILE:
            raise ProviderUnavailable("external scorer needs a file-path image")
        req = SimilarityRequest(id=f"q{next(self._ids)}", image=image.path, box=box, phrase=phrase)
        return self.request(req)

    def close(self) -> None:
        self._closed = True
        self._stream.close()

    def __enter__(self) -> "ExternalProvider":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def external_similarity(endpoint: Endpoint, req: SimilarityRequest) -> float:
    """One-shot query: connect, send ``req``, return the similarity, disconnect."""
    with ExternalProvider(endpoint) as client:
        return client.request(req)
