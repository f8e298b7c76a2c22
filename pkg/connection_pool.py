"""Pooled aiohttp session shared by the text-generation clients."""
import logging
from typing import Optional

import aiohttp

from config import ClientConfig

logger = logging.getLogger(__name__)


class HTTPSessionManager:
    """Owns one ClientSession; the connector limit caps requests in flight."""

    def __init__(self, pool_size: int = 4, timeout: float = 30.0):
        if pool_size < 1:
            raise ValueError("pool_size must be positive")
        self.pool_size = pool_size
        self.timeout = timeout
        self._session: Optional[aiohttp.ClientSession] = None

    @classmethod
    def for_client(cls, config: ClientConfig) -> "HTTPSessionManager":
        return cls(pool_size=config.max_in_flight, timeout=config.timeout)

    @property
    def started(self) -> bool:
        return self._session is not None and not self._session.closed

    async def start(self) -> aiohttp.ClientSession:
        if self.started:
            return self._session
        connector = aiohttp.TCPConnector(
            limit=self.pool_size,
            limit_per_host=self.pool_size,
            force_close=True,
            enable_cleanup_closed=True,
        )
        self._session = aiohttp.ClientSession(
            connector=connector,
            timeout=aiohttp.ClientTimeout(total=self.timeout),
        )
        logger.debug(f"HTTP pool up: {self.pool_size} connections, {self.timeout}s total timeout")
        return self._session

    async def stop(self) -> None:
        if self.started:
            await self._session.close()
            logger.debug("HTTP pool closed")
        self._session = None

    async def __aenter__(self):
        await self.start()
        return self

    async def __aexit__(self, exc_type, exc, tb):
        await self.stop()

    @property
    def session(self) -> aiohttp.ClientSession:
        if self._session is None:
            raise RuntimeError("Session manager not started")
        return self._session
