"""Object fetch from local files or S3-compatible HTTP endpoints, and the PNG tile cache."""

from __future__ import annotations

import io
import logging
import os
import tempfile
import time
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import WsiReproError

logger = logging.getLogger(__name__)

DEFAULT_ENDPOINT = "https://storage.googleapis.com"
RETRY_ATTEMPTS = 3
RETRY_BASE_DELAY = 0.25
RETRY_FACTOR = 4.0


class StorageError(WsiReproError):
    pass


class NotFound(StorageError):
    pass


class RangeUnsatisfiable(StorageError):
    pass


class TransportError(StorageError):
    def __init__(self, message: str, attempts: int):
        self.attempts = attempts
        super().__init__(f"{message} (after {attempts} attempts)")


class UnparseableUrl(StorageError):
    pass


class CacheIoError(StorageError):
    pass


class CorruptEntry(StorageError):
    pass


@dataclass(frozen=True)
class ObjectUrl:
    scheme: str  # "local" | "s3http"
    endpoint: str
    bucket: str
    key: str

    def __post_init__(self):
        if self.scheme not in ("local", "s3http"):
            raise UnparseableUrl(f"unknown scheme {self.scheme!r}")
        if not self.key:
            raise UnparseableUrl("empty object key")
        if self.scheme == "s3http":
            parsed = urllib.parse.urlparse(self.endpoint)
            if parsed.scheme not in ("http", "https") or not parsed.netloc:
                raise UnparseableUrl(f"endpoint {self.endpoint!r} is not an absolute URL")

    @property
    def http_url(self) -> str:
        return f"{self.endpoint.rstrip('/')}/{self.bucket}/{urllib.parse.quote(self.key)}"

    def __str__(self) -> str:
        return f"local://{self.key}" if self.scheme == "local" else self.http_url


def parse_url(text: str, endpoint: str = DEFAULT_ENDPOINT) -> ObjectUrl:
    """Parse ``gs://``, ``s3http://`` or ``local://`` URLs into an :class:`ObjectUrl`."""
    scheme, sep, rest = text.partition("://")
    if not sep:
        raise UnparseableUrl(text)
    if scheme == "local":
        if not rest:
            raise UnparseableUrl(text)
        return ObjectUrl("local", "", "", rest)
    if scheme == "gs":
        bucket, _, key = rest.partition("/")
        if not bucket or not key:
            raise UnparseableUrl(text)
        return ObjectUrl("s3http", endpoint, bucket, key)
    if scheme in ("s3http", "s3https"):
        host, _, path = rest.partition("/")
        bucket, _, key = path.partition("/")
        if not host or not bucket or not key:
            raise UnparseableUrl(text)
        proto = "https" if scheme == "s3https" else "http"
        return ObjectUrl("s3http", f"{proto}://{host}", bucket, urllib.parse.unquote(key))
    raise UnparseableUrl(text)


def resolve_gcs_url(record, endpoint: str = DEFAULT_ENDPOINT) -> ObjectUrl:
    return parse_url(record.gcs_url, endpoint)


def _fetch_local(url: ObjectUrl, byte_range: Optional[tuple[int, int]]) -> bytes:
    path = Path(url.key)
    try:
        with path.open("rb") as fh:
            size = os.fstat(fh.fileno()).st_size
            if byte_range is None:
                return fh.read()
            offset, length = byte_range
            if offset < 0 or length < 0 or offset + length > size:
                raise RangeUnsatisfiable(f"range ({offset}, {length}) outside object of {size} bytes")
            fh.seek(offset)
            return fh.read(length)
    except (FileNotFoundError, IsADirectoryError, NotADirectoryError):
        raise NotFound(str(url)) from None


def _fetch_http(url: ObjectUrl, byte_range: Optional[tuple[int, int]], timeout: float) -> bytes:
    request = urllib.request.Request(url.http_url, method="GET")
    if byte_range is not None:
        offset, length = byte_range
        if offset < 0 or length <= 0:
            if length == 0 and offset >= 0:
                return b""
            raise RangeUnsatisfiable(f"invalid range ({offset}, {length})")
        request.add_header("Range", f"bytes={offset}-{offset + length - 1}")
    with urllib.request.urlopen(request, timeout=timeout) as response:
        body = response.read()
        status = response.status
    if byte_range is None:
        return body
    offset, length = byte_range
    if status == 200:
        # Server ignored the Range header: slice the full object.
        body = body[offset : offset + length]
    if len(body) != length:
        raise RangeUnsatisfiable(f"range ({offset}, {length}) returned {len(body)} bytes")
    return body


def fetch_object(
    url: ObjectUrl,
    byte_range: Optional[tuple[int, int]] = None,
    *,
    attempts: int = RETRY_ATTEMPTS,
    base_delay: float = RETRY_BASE_DELAY,
    factor: float = RETRY_FACTOR,
    timeout: float = 30.0,
    sleep: Callable[[float], None] = time.sleep,
) -> bytes:
    """Return the object's bytes, or exactly ``length`` bytes from ``offset``.

    Transient HTTP failures (5xx, connection errors) are retried with
    exponential backoff; 404 and 416 are final.
    """
    if url.scheme == "local":
        return _fetch_local(url, byte_range)
    last: Exception | None = None
    for attempt in range(1, attempts + 1):
        try:
            return _fetch_http(url, byte_range, timeout)
        except urllib.error.HTTPError as exc:
            if exc.code in (403, 404):
                raise NotFound(f"{url.http_url}: HTTP {exc.code}") from None
            if exc.code == 416:
                raise RangeUnsatisfiable(f"{url.http_url}: HTTP 416") from None
            if exc.code < 500 and exc.code != 429:
                raise TransportError(f"{url.http_url}: HTTP {exc.code}", attempt) from None
            last = exc
        except (urllib.error.URLError, ConnectionError, TimeoutError) as exc:
            last = exc
        if attempt < attempts:
            delay = base_delay * factor ** (attempt - 1)
            logger.warning("fetch %s failed (%s), retrying in %.2fs", url, last, delay)
            sleep(delay)
    raise TransportError(f"{url}: {last}", attempts)


# -- PNG tile cache ----------------------------------------------------------


@dataclass(frozen=True)
class TileCacheKey:
    sop_instance_uid: str
    tile_index: int
    params_digest: str


class TileCache:
    """PNG files laid out ``<root>/<sop_uid>/<params_digest>/<tile_index>.png``.

    Writes go to a temporary file in the target directory and are renamed into
    place, so readers never observe a partial entry.
    """

    def __init__(self, root):
        self.root = Path(root).expanduser()

    def path(self, key: TileCacheKey) -> Path:
        return self.root / key.sop_instance_uid / key.params_digest / f"{key.tile_index}.png"

    def put(self, key: TileCacheKey, tile) -> None:
        from PIL import Image
        from PIL.PngImagePlugin import PngInfo

        target = self.path(key)
        meta = PngInfo()
        meta.add_text("col", str(tile.col))
        meta.add_text("row", str(tile.row))
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(prefix=".tmp-", suffix=".png", dir=target.parent)
            try:
                with os.fdopen(fd, "wb") as fh:
                    Image.fromarray(np.ascontiguousarray(tile.pixels), "RGB").save(fh, format="PNG", pnginfo=meta)
                os.replace(tmp, target)
            except BaseException:
                Path(tmp).unlink(missing_ok=True)
                raise
        except OSError as exc:
            raise CacheIoError(f"{target}: {exc}") from exc

    def get(self, key: TileCacheKey):
        from PIL import Image

        from .tiling import TileImage

        target = self.path(key)
        try:
            data = target.read_bytes()
        except FileNotFoundError:
            return None
        except OSError as exc:
            raise CacheIoError(f"{target}: {exc}") from exc
        try:
            with Image.open(io.BytesIO(data)) as image:
                if image.mode != "RGB":
                    raise CorruptEntry(f"{target}: mode {image.mode}")
                pixels = np.asarray(image)
                col, row = int(image.text["col"]), int(image.text["row"])
        except Exception as exc:
            logger.warning("dropping corrupt cache entry %s: %s", target, exc)
            target.unlink(missing_ok=True)
            return None
        return TileImage(index=key.tile_index, col=col, row=row, pixels=pixels)


def cache_put(cache: TileCache, key: TileCacheKey, tile) -> None:
    cache.put(key, tile)


def cache_get(cache: TileCache, key: TileCacheKey):
    return cache.get(key)
