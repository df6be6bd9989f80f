"""
On-disk cache for pretrained guide weights.

Weight files are fetched once over HTTP (with retries) and then served from the
local cache directory, so repeated runs and offline machines reuse them.
"""

import hashlib
import io
import logging
import time
from pathlib import Path
from typing import Any

import httpx
import torch

from src.config import (
    DELAY_SECONDS,
    DOWNLOAD_TIMEOUT_SECONDS,
    HTTP_SUCCESS,
    MAX_RETRIES,
    PRETRAINED_WEIGHT_URLS,
)
from src.models import WeightDownloadError

logger = logging.getLogger(__name__)


class WeightCache:
    """
    File-based cache of pretrained state dicts keyed by backbone family.

    Files are stored as `<family>-<sha256 prefix of url>.pth`, so a changed URL
    never serves stale weights.
    """

    def __init__(
        self,
        cache_dir: str,
        max_retries: int = MAX_RETRIES,
        delay_seconds: int = DELAY_SECONDS,
        timeout: int = DOWNLOAD_TIMEOUT_SECONDS,
    ):
        """
        Initialize the weight cache.

        Args:
            cache_dir: Directory holding weight files.
            max_retries: Maximum number of download attempts.
            delay_seconds: Delay between attempts in seconds.
            timeout: Request timeout in seconds.
        """
        if max_retries < 1:
            raise ValueError("max_retries must be at least 1")
        if delay_seconds < 0:
            raise ValueError("delay_seconds must be non-negative")

        self.cache_dir = Path(cache_dir)
        self.max_retries = max_retries
        self.delay_seconds = delay_seconds
        self.timeout = timeout
        self.logger = logging.getLogger(f"{__name__}.{self.__class__.__name__}")

        self.cache_dir.mkdir(parents=True, exist_ok=True)

    def _get_cache_path(self, family: str, url: str) -> Path:
        url_hash = hashlib.sha256(url.encode()).hexdigest()[:12]
        return self.cache_dir / f"{family}-{url_hash}.pth"

    def get_state_dict(self, family: str) -> dict[str, torch.Tensor]:
        """
        Return the pretrained state dict for a backbone family.

        Args:
            family: Backbone family name with a known weight URL.

        Returns:
            The state dict, loaded from cache or downloaded into it first.

        Raises:
            WeightDownloadError: If the family is unknown or the download fails.
        """
        url = PRETRAINED_WEIGHT_URLS.get(family)
        if url is None:
            raise WeightDownloadError(f"No pretrained weights known for {family}")

        cache_path = self._get_cache_path(family, url)
        if cache_path.exists():
            self.logger.debug(f"Cache hit for {family} weights: {cache_path}")
            return torch.load(cache_path, map_location="cpu", weights_only=True)

        content = self._fetch_with_retry(url)
        # Validate before caching so a truncated body never lands on disk
        state_dict = torch.load(io.BytesIO(content), map_location="cpu", weights_only=True)
        cache_path.write_bytes(content)
        self.logger.info(f"Cached {family} weights at {cache_path}")
        return state_dict

    def _fetch_with_retry(self, url: str) -> bytes:
        """
        Download a URL with retry logic.

        Raises:
            WeightDownloadError: If every attempt fails.
        """
        for attempt in range(self.max_retries):
            try:
                self.logger.info(f"Attempt {attempt + 1} for {url}...")
                with httpx.Client(timeout=self.timeout, follow_redirects=True) as client:
                    response = client.get(url)
                if response.status_code != HTTP_SUCCESS:
                    response.raise_for_status()
                self.logger.info(f"Successfully downloaded {url}")
                return response.content
            except httpx.HTTPError as e:
                self.logger.error(f"HTTP Error in {url}: {e}")
                if attempt < self.max_retries - 1:
                    self.logger.warning(f"Retrying in {self.delay_seconds}s...")
                    time.sleep(self.delay_seconds)

        raise WeightDownloadError(f"Failed {url} after {self.max_retries} attempts")

    def clear_all(self) -> int:
        """
        Remove all cached weight files.

        Returns:
            Number of files removed.
        """
        removed_count = 0
        for cache_file in self.cache_dir.glob("*.pth"):
            try:
                cache_file.unlink()
                removed_count += 1
            except OSError:
                continue
        return removed_count

    def get_cache_stats(self) -> dict[str, Any]:
        """Get cache statistics."""
        files = [f for f in self.cache_dir.glob("*.pth") if f.is_file()]
        return {
            "cache_dir": str(self.cache_dir),
            "total_files": len(files),
            "total_size_bytes": sum(f.stat().st_size for f in files),
            "families": sorted(f.name.rsplit("-", 1)[0] for f in files),
        }
