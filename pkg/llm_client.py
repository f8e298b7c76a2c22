import aiohttp
import asyncio
import hashlib
import logging
from contextlib import asynccontextmanager
from typing import AsyncIterator, Optional, Protocol, Tuple

import numpy as np
from aiohttp_retry import RetryClient, ExponentialRetry

from config import ClientConfig
from connection_pool import HTTPSessionManager
from errors import ClientHttpError, ClientTimeout, EmptyCaption

logger = logging.getLogger(__name__)


class TextGenerator(Protocol):
    model_name: str

    async def generate(self, prompt: str, max_tokens: Optional[int] = None) -> str: ...


async def _has_text(response: aiohttp.ClientResponse) -> bool:
    """Retry hook: a 200 whose JSON lacks a nonempty `text` is retried like a server error."""
    if response.status != 200:
        return True
    try:
        data = await response.json(content_type=None)
    except (aiohttp.ContentTypeError, ValueError):
        return False
    return isinstance(data, dict) and isinstance(data.get("text"), str) and bool(data["text"].strip())


class TextGenClient:
    """JSON-over-HTTP text generation: POST {"prompt", "max_tokens"} -> {"text"}."""

    def __init__(self, config: ClientConfig):
        if not config.endpoint:
            raise ValueError("TextGenClient needs an endpoint")
        self.config = config
        self.endpoint = config.endpoint
        self.model_name = config.model_name
        self.session_manager = HTTPSessionManager.for_client(config)
        self.client: Optional[RetryClient] = None

        self.retry_options = ExponentialRetry(
            attempts=config.retries + 1,
            start_timeout=0.1,
            statuses={429, 500, 502, 503, 504},
            exceptions={aiohttp.ClientError, asyncio.TimeoutError},
            factor=2,
            evaluate_response_callback=_has_text,
        )

    async def __aenter__(self):
        session = await self.session_manager.start()
        self.client = RetryClient(
            client_session=session,
            retry_options=self.retry_options,
            raise_for_status=False,
        )
        return self

    async def __aexit__(self, exc_type, exc, tb):
        await self.close()
        if exc_type is not None and not issubclass(exc_type, asyncio.CancelledError):
            logger.error(f"Text generation at {self.endpoint} ended with {exc_type.__name__}: {exc}")

    async def generate(self, prompt: str, max_tokens: Optional[int] = None) -> str:
        if not self.client:
            raise RuntimeError("TextGenClient must be entered with `async with` before generate()")

        payload = {"prompt": prompt, "max_tokens": max_tokens or self.config.max_tokens}
        try:
            async with self.client.post(self.endpoint, json=payload) as response:
                if response.status != 200:
                    body = await response.text()
                    raise ClientHttpError(response.status, body[:200])
                data = await response.json(content_type=None)
        except (asyncio.TimeoutError, aiohttp.ServerTimeoutError) as e:
            raise ClientTimeout(
                f"no response from {self.endpoint} within {self.config.timeout}s "
                f"after {self.config.retries + 1} attempts"
            ) from e
        except aiohttp.ClientError as e:
            raise ClientHttpError(0, f"transport error: {e}") from e

        text = data.get("text") if isinstance(data, dict) else None
        if not isinstance(text, str) or not text.strip():
            raise EmptyCaption(f"{self.endpoint} returned no text after {self.config.retries + 1} attempts")
        return text.strip()

    async def close(self) -> None:
        """Release the pooled session; transport errors while closing are only logged."""
        client, self.client = self.client, None
        try:
            await self.session_manager.stop()
        except aiohttp.ClientError as e:
            logger.warning(f"Closing the text generation session failed: {e}")
        if client is None:
            logger.debug("close() on a client that was never entered")


_SUBJECTS = ("A person", "Two people", "A group of people", "A man in a dark jacket", "A woman",
             "A car", "A delivery van", "Several pedestrians", "A cyclist", "A security guard")
_ACTIONS = ("walks slowly across", "stands near", "runs through", "moves towards", "waits beside",
            "turns around in", "gestures at someone in", "enters", "leaves", "drives along")
_PLACES = ("a parking lot", "a shop entrance", "a narrow street", "a building lobby", "an intersection",
           "a hallway", "a gas station", "a subway platform", "a residential yard", "a warehouse floor")
_DETAILS = ("while the camera stays fixed overhead", "as other people pass in the background",
            "under dim night lighting", "in clear daylight", "while traffic continues nearby",
            "and the scene remains crowded", "as the view is partly blocked by a pillar")


class MockTextGenClient:
    """Offline stand-in with the same `generate` contract.

    `caption` style returns a templated scene description picked
    deterministically from the prompt and seed; `echo` returns the prompt.
    """

    def __init__(self, seed: int = 0, style: str = "echo", model_name: Optional[str] = None):
        if style not in ("echo", "caption"):
            raise ValueError(f"unknown mock style {style!r}")
        self.seed = seed
        self.style = style
        self.model_name = model_name or f"mock-{style}"
        self.calls = 0

    async def __aenter__(self):
        return self

    async def __aexit__(self, exc_type, exc, tb):
        return None

    def _rng(self, prompt: str) -> np.random.Generator:
        digest = hashlib.sha256(f"{self.seed}|{prompt}".encode("utf-8")).digest()
        return np.random.default_rng(int.from_bytes(digest[:8], "little"))

    async def generate(self, prompt: str, max_tokens: Optional[int] = None) -> str:
        self.calls += 1
        if self.style == "echo":
            words = prompt.split()
            if max_tokens:
                words = words[:max_tokens]
            return " ".join(words)
        rng = self._rng(prompt)
        pick = lambda options: options[int(rng.integers(len(options)))]
        first = f"{pick(_SUBJECTS)} {pick(_ACTIONS)} {pick(_PLACES)} {pick(_DETAILS)}."
        second = f"Later, {pick(_SUBJECTS).lower()} {pick(_ACTIONS)} {pick(_PLACES)}."
        return f"{first} {second}"


@asynccontextmanager
async def open_clients(config: ClientConfig) -> AsyncIterator[Tuple[TextGenerator, TextGenerator]]:
    """Yield (captioner, responder). Live mode shares one HTTP client for both roles."""
    if config.mode == "mock":
        yield (
            MockTextGenClient(config.mock_seed, "caption", "mock-captioner"),
            MockTextGenClient(config.mock_seed, "echo", config.model_name),
        )
        return
    async with TextGenClient(config) as client:
        logger.info(f"Text generation client ready at {config.endpoint} (max in flight {config.max_in_flight})")
        yield client, client
