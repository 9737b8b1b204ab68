"""Recognition server: detect -> preprocess -> embed -> match over TCP.

The asyncio event loop only reads, decodes and writes lines. Everything
that touches pixels or the network weights runs on a fixed thread pool, so
a ping (or any new connection) is answered while embeddings are still being
computed.
"""

import asyncio
import itertools
import json
import logging
import os
import queue
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import protocol
from .errors import EmptyStoreError, FrameError, MalformedRequest, PGMParseError, RegisterRejected
from .model import IMAGE_SIZE, FaceImage
from .pgm import decode_pgm, resize_bilinear
from .store import FaceDb, IdentityRecord

log = logging.getLogger(__name__)

MIN_FRAME = 32


# -- detection --------------------------------------------------------------

@dataclass
class DetectedFace:
    bounds: tuple  # (top, left, bottom, right), half-open, in frame pixels
    face_uid: str
    image: FaceImage


class VarianceGateDetector:
    """Whole-frame detector: a frame is one face iff its pixel std exceeds
    ``threshold``; near-uniform frames carry no face."""

    def __init__(self, threshold=0.03):
        self.threshold = threshold

    def __call__(self, frame):
        if float(np.std(frame)) > self.threshold:
            return [(0, 0, frame.shape[0], frame.shape[1])]
        return []


_uid_counter = itertools.count(1)


def _next_face_uid():
    return f"{os.getpid()}-{next(_uid_counter)}"


def detect_faces(frame, detector=None):
    """Run ``detector`` (boxes from a raster) and crop/resize each hit.

    Alignment is the identity transform.
    """
    frame = np.asarray(frame, dtype=np.float32)
    if frame.ndim != 2 or frame.shape[0] < MIN_FRAME or frame.shape[1] < MIN_FRAME:
        raise FrameError(f"frames must be at least {MIN_FRAME}x{MIN_FRAME}, got {frame.shape}")
    detector = detector or VarianceGateDetector()
    faces = []
    for top, left, bottom, right in detector(frame):
        top, left = max(0, int(top)), max(0, int(left))
        bottom, right = min(frame.shape[0], int(bottom)), min(frame.shape[1], int(right))
        if bottom - top < 2 or right - left < 2:
            continue
        crop = resize_bilinear(frame[top:bottom, left:right], (IMAGE_SIZE, IMAGE_SIZE))
        faces.append(DetectedFace((top, left, bottom, right), _next_face_uid(),
                                  FaceImage(np.clip(crop, 0, 1))))
    return faces


# -- embedding back-ends ----------------------------------------------------

class ModelEmbedder:
    """Inference-mode network; safe to call from several threads."""

    def __init__(self, net):
        self.net = net

    def embed(self, images):
        return self.net.embed(images).astype(np.float64)


class SyntheticEmbedder:
    """Test hook: sleeps ``latency_ms`` per image and returns a cheap
    deterministic 5-d summary of the pixels instead of running the CNN."""

    def __init__(self, latency_ms):
        self.latency_ms = latency_ms

    def embed(self, images):
        time.sleep(self.latency_ms * len(images) / 1000.0)
        rows = [np.array([band.mean() for band in np.array_split(im.pixels, 5, axis=0)])
                for im in images]
        return np.stack(rows) * 4.0


class MicroBatcher:
    """Pools embedding calls from many threads for up to ``window_ms`` and
    runs them as one batch."""

    def __init__(self, embedder, window_ms, max_batch=200):
        self.embedder = embedder
        self.window = window_ms / 1000.0
        self.max_batch = max_batch
        self._queue = queue.Queue()
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def embed(self, images):
        fut = Future()
        self._queue.put((list(images), fut))
        return fut.result()

    def _run(self):
        while True:
            first = self._queue.get()
            if first is None:
                return
            jobs, n = [first], len(first[0])
            deadline = time.monotonic() + self.window
            while n < self.max_batch:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                try:
                    job = self._queue.get(timeout=remaining)
                except queue.Empty:
                    break
                if job is None:
                    self._queue.put(None)
                    break
                jobs.append(job)
                n += len(job[0])
            try:
                out = self.embedder.embed([im for imgs, _ in jobs for im in imgs])
            except Exception as exc:
                for _, fut in jobs:
                    fut.set_exception(exc)
                continue
            pos = 0
            for imgs, fut in jobs:
                fut.set_result(out[pos:pos + len(imgs)])
                pos += len(imgs)

    def close(self):
        self._queue.put(None)
        self._thread.join(timeout=5)


# -- pipeline ---------------------------------------------------------------

class RecognitionPipeline:
    def __init__(self, embedder, store, detector=None, k=3, activity_log=None):
        if k < 1:
            raise ValueError("k must be at least 1")
        self.embedder = embedder
        self.store = store
        self.detector = detector or VarianceGateDetector()
        self.k = k
        self.activity_log = activity_log
        self._log_lock = threading.Lock()

    def _decode(self, payload, what):
        if not payload:
            raise MalformedRequest(f"{what} is empty", what)
        try:
            raster = decode_pgm(payload)
        except PGMParseError as exc:
            raise MalformedRequest(f"{what}: {exc}", what) from None
        return raster

    def register(self, user_id, image):
        """Enrol one face; returns the Registered acknowledgement."""
        raster = self._decode(image, "image")
        try:
            faces = detect_faces(raster, self.detector)
        except FrameError as exc:
            raise MalformedRequest(str(exc), "image") from None
        if not faces:
            raise RegisterRejected("register rejected: no face detected")
        if len(faces) > 1:
            raise RegisterRejected(f"register rejected: {len(faces)} faces detected, expected one")
        vec = self.embedder.embed([faces[0].image])[0]
        self.store.insert(IdentityRecord(user_id, vec))
        return protocol.Registered(user_id, [float(v) for v in vec])

    def recognize(self, request_id, frames):
        """Match the faces of the first frame that contains any.

        Every face found in any frame is embedded; one MatchResult is
        returned per face of the first frame with a detection, or a single
        empty result when no frame has a face.
        """
        rasters = []
        for payload in frames:
            try:
                rasters.append(self._decode(payload, "frames"))
            except MalformedRequest:
                continue
        if not rasters:
            raise MalformedRequest("no frame could be decoded", "frames")
        per_frame = []
        for raster in rasters:
            try:
                per_frame.append(detect_faces(raster, self.detector))
            except FrameError:
                per_frame.append([])
        faces = [f for fs in per_frame for f in fs]
        if not faces:
            return [protocol.MatchResult(request_id, [])]
        vectors = self.embedder.embed([f.image for f in faces])
        primary = next(fs for fs in per_frame if fs)
        results = []
        for face, vec in zip(primary, vectors):
            try:
                matches = self.store.top_k(vec, self.k)
                result = protocol.MatchResult(request_id, matches, face.face_uid)
            except EmptyStoreError:
                result = protocol.MatchResult(request_id, [], face.face_uid, empty_store=True)
            results.append(result)
        self._log_activity(results)
        return results

    def _log_activity(self, results):
        if self.activity_log is None:
            return
        lines = []
        for r in results:
            top = r.matches[0] if r.matches else None
            lines.append(json.dumps({
                "timestamp": time.time(), "request_id": r.request_id, "face_uid": r.face_uid,
                "user_id": top.user_id if top else None,
                "distance": top.distance if top else None,
            }))
        with self._log_lock, open(self.activity_log, "a") as f:
            f.write("\n".join(lines) + "\n")


# -- server -----------------------------------------------------------------

@dataclass
class ServerConfig:
    host: str = "127.0.0.1"
    port: int = 7070
    k: int = 3
    embed_workers: int = 4
    detector_threshold: float = 0.03
    synthetic_embed_latency_ms: float = None
    checkpoint_path: str = None
    db_path: str = None
    activity_log: str = None
    batch_window_ms: float = 0.0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.embed_workers < 1:
            raise ValueError("embed_workers must be at least 1")


def build_pipeline(cfg, net=None, store=None):
    """Assemble the pipeline described by ``cfg`` (loading files as needed)."""
    from .model import load_checkpoint

    if cfg.synthetic_embed_latency_ms is not None:
        embedder = SyntheticEmbedder(cfg.synthetic_embed_latency_ms)
    else:
        if net is None:
            if cfg.checkpoint_path is None:
                raise ValueError("a checkpoint is required unless synthetic latency is configured")
            net = load_checkpoint(cfg.checkpoint_path)
        embedder = ModelEmbedder(net)
    if cfg.batch_window_ms:
        embedder = MicroBatcher(embedder, cfg.batch_window_ms)
    if store is None:
        if cfg.db_path is not None and os.path.exists(cfg.db_path):
            store = FaceDb.load(cfg.db_path)
        else:
            store = FaceDb(path=cfg.db_path)
    return RecognitionPipeline(embedder, store, VarianceGateDetector(cfg.detector_threshold),
                               cfg.k, cfg.activity_log)


class FaceServer:
    """Line-oriented asyncio server with a worker pool for embedding."""

    def __init__(self, pipeline, host="127.0.0.1", port=0, workers=4):
        self.pipeline = pipeline
        self.host, self.port = host, port
        self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="embed")
        self._server = None
        self._inflight = set()
        self._writers = set()

    async def start(self):
        self._server = await asyncio.start_server(self._handle, self.host, self.port,
                                                  limit=64 * 1024 * 1024)
        self.port = self._server.sockets[0].getsockname()[1]
        log.info("listening on %s:%d", self.host, self.port)

    async def serve_forever(self):
        await self._server.serve_forever()

    async def shutdown(self):
        """Stop accepting, let in-flight requests answer, then close."""
        if self._server is not None:
            self._server.close()
        while self._inflight:
            await asyncio.gather(*list(self._inflight), return_exceptions=True)
        for w in list(self._writers):
            w.close()
        self._pool.shutdown(wait=True)
        if isinstance(self.pipeline.embedder, MicroBatcher):
            self.pipeline.embedder.close()
        store = self.pipeline.store
        if store.path is not None and store.dirty:
            store.persist()

    async def _send(self, writer, lock, msg):
        async with lock:
            if writer.is_closing():
                return
            writer.write(protocol.encode(msg))
            try:
                await writer.drain()
            except ConnectionError:
                pass

    async def _work(self, writer, lock, fn, *args):
        loop = asyncio.get_running_loop()
        try:
            out = await loop.run_in_executor(self._pool, fn, *args)
        except (MalformedRequest, RegisterRejected) as exc:
            out = [protocol.ErrorReply(str(exc))]
        except Exception as exc:  # keep the connection alive on pipeline bugs
            log.exception("request failed")
            out = [protocol.ErrorReply(f"internal error: {exc}")]
        if not isinstance(out, list):
            out = [out]
        for msg in out:
            await self._send(writer, lock, msg)

    async def _handle(self, reader, writer):
        lock = asyncio.Lock()
        mine = set()
        self._writers.add(writer)
        try:
            while True:
                try:
                    line = await reader.readline()
                except (ConnectionError, asyncio.LimitOverrunError, ValueError):
                    break
                if not line:
                    break
                if not line.strip():
                    continue
                try:
                    msg = protocol.decode(line)
                except MalformedRequest as exc:
                    await self._send(writer, lock, protocol.ErrorReply(f"malformed request: {exc}"))
                    continue
                if isinstance(msg, protocol.Ping):
                    await self._send(writer, lock, protocol.Pong())
                elif isinstance(msg, protocol.RegisterRequest):
                    self._spawn(mine, self._work(writer, lock, self.pipeline.register,
                                                 msg.user_id, msg.image))
                elif isinstance(msg, protocol.RecognizeRequest):
                    self._spawn(mine, self._work(writer, lock, self.pipeline.recognize,
                                                 msg.request_id, msg.frames))
                else:
                    await self._send(writer, lock, protocol.ErrorReply(
                        f"malformed request: unexpected message type {type(msg).__name__}"))
        finally:
            self._writers.discard(writer)
            # answer whatever the peer already asked for before hanging up
            if mine:
                await asyncio.gather(*list(mine), return_exceptions=True)
            if not writer.is_closing():
                writer.close()

    def _spawn(self, mine, coro):
        task = asyncio.ensure_future(coro)
        for bucket in (self._inflight, mine):
            bucket.add(task)
            task.add_done_callback(bucket.discard)


class ServerThread:
    """Run a FaceServer on a private event loop in a background thread."""

    def __init__(self, pipeline, host="127.0.0.1", port=0, workers=4):
        self.server = FaceServer(pipeline, host, port, workers)
        self._loop = asyncio.new_event_loop()
        self._ready = threading.Event()
        self._error = None
        self._thread = threading.Thread(target=self._run, daemon=True)

    def _run(self):
        asyncio.set_event_loop(self._loop)
        try:
            self._loop.run_until_complete(self.server.start())
        except Exception as exc:
            self._error = exc
            self._ready.set()
            return
        self._ready.set()
        self._loop.run_forever()

    def start(self):
        self._thread.start()
        self._ready.wait()
        if self._error is not None:
            raise self._error
        return self

    @property
    def address(self):
        return self.server.host, self.server.port

    def stop(self):
        fut = asyncio.run_coroutine_threadsafe(self.server.shutdown(), self._loop)
        fut.result(timeout=60)
        self._loop.call_soon_threadsafe(self._loop.stop)
        self._thread.join(timeout=10)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve(cfg, net=None):
    """Blocking entry point: serve until SIGINT/SIGTERM, then drain."""
    import signal

    pipeline = build_pipeline(cfg, net)
    server = FaceServer(pipeline, cfg.host, cfg.port, cfg.embed_workers)

    async def main():
        await server.start()
        stop = asyncio.Event()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            try:
                loop.add_signal_handler(sig, stop.set)
            except (NotImplementedError, RuntimeError):
                pass
        print(f"serving on {server.host}:{server.port}", flush=True)
        await stop.wait()
        await server.shutdown()

    asyncio.run(main())
