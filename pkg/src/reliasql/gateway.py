"""Chat-completion access in live, replay and stub modes.

Every model call in the pipeline goes through :meth:`Gateway.complete`, so a
run can be recorded once against a live endpoint and replayed offline from
the JSON-lines cache, or driven entirely by deterministic stub rules.
"""

from __future__ import annotations

import fnmatch
import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional

import httpx

logger = logging.getLogger(__name__)

DEFAULT_API_KEY_ENV = "LLM_API_KEY"
STUB_SENTINEL = "STUB: no rule matched"


class GatewayError(RuntimeError):
    pass


class TransportError(GatewayError):
    pass


class ConfigurationError(GatewayError):
    pass


class CacheMissError(GatewayError):
    def __init__(self, key: str):
        super().__init__(f"no cached response for request {key}")
        self.key = key


@dataclass(frozen=True)
class ChatRequest:
    system_text: str
    user_text: str
    temperature: float = 0.0
    max_output_tokens: int = 512
    model_tag: str = "default"
    # Distinguishes ensemble members that share a prompt, so each gets its own cache key.
    sample_index: int = 0

    def __post_init__(self) -> None:
        if not self.user_text:
            raise ValueError("user_text must be non-empty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    def canonical(self) -> str:
        payload = asdict(self)
        payload["temperature"] = float(self.temperature)
        return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)

    def key(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ChatResponse:
    text: str
    cached: bool = False
    latency_ms: int = 0


class ResponseCache:
    """Append-only JSON-lines store of ``{key, request, response}`` records."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._records: dict[str, str] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        self.writes = 0
        if self.path is not None and self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    if not line.strip():
                        continue
                    try:
                        record = json.loads(line)
                    except json.JSONDecodeError:
                        logger.warning("%s:%d: skipping corrupt cache line", self.path, lineno)
                        continue
                    self._records[record["key"]] = record["response"]

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, key: str) -> bool:
        return key in self._records

    def get(self, key: str) -> Optional[str]:
        with self._lock:
            text = self._records.get(key)
            if text is None:
                self.misses += 1
            else:
                self.hits += 1
            return text

    def put(self, request: ChatRequest, text: str) -> None:
        key = request.key()
        line = json.dumps(
            {"key": key, "request": asdict(request), "response": text},
            ensure_ascii=False,
            sort_keys=True,
        )
        with self._lock:
            self._records[key] = text
            self.writes += 1
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(line + "\n")

    def stats(self) -> dict:
        return {"entries": len(self), "hits": self.hits, "misses": self.misses, "writes": self.writes}


class RateLimiter:
    """Token bucket; ``interval`` seconds per token, bucket holds ``burst``."""

    def __init__(
        self,
        interval: float = 0.5,
        burst: int = 1,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.interval = interval
        self.burst = burst
        self._clock = clock
        self._sleep = sleep
        self._tokens = float(burst)
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        if self.interval <= 0:
            return
        with self._lock:
            now = self._clock()
            self._tokens = min(self.burst, self._tokens + (now - self._last) / self.interval)
            self._last = now
            if self._tokens < 1:
                wait = (1 - self._tokens) * self.interval
                self._sleep(wait)
                self._last = self._clock()
                self._tokens = 0.0
            else:
                self._tokens -= 1


class Gateway:
    def complete(self, request: ChatRequest) -> ChatResponse:
        raise NotImplementedError

    def stats(self) -> dict:
        return {"mode": type(self).__name__}


def _retrying_post(
    client: httpx.Client,
    url: str,
    payload: dict,
    headers: Mapping[str, str],
    *,
    retries: int,
    backoff: float,
    sleep: Callable[[float], None],
) -> dict:
    last: Exception | None = None
    for attempt in range(retries + 1):
        try:
            resp = client.post(url, json=payload, headers=dict(headers))
        except httpx.HTTPError as exc:
            last = exc
        else:
            if resp.status_code == 429 or resp.status_code >= 500:
                last = TransportError(f"HTTP {resp.status_code} from {url}")
            elif resp.status_code >= 400:
                raise TransportError(f"HTTP {resp.status_code} from {url}: {resp.text[:200]}")
            else:
                return resp.json()
        if attempt < retries:
            delay = backoff * (2 ** attempt)
            logger.warning("request to %s failed (%s); retry %d in %.1fs", url, last, attempt + 1, delay)
            sleep(delay)
    raise TransportError(f"{url}: giving up after {retries + 1} attempts: {last}") from last


class LiveGateway(Gateway):
    def __init__(
        self,
        endpoint: str,
        *,
        api_key_env: str = DEFAULT_API_KEY_ENV,
        models: Mapping[str, str] | None = None,
        cache: ResponseCache | None = None,
        retries: int = 3,
        backoff: float = 1.0,
        limiter: RateLimiter | None = None,
        client: httpx.Client | None = None,
        timeout: float = 60.0,
        sleep: Callable[[float], None] = time.sleep,
    ):
        api_key = os.environ.get(api_key_env)
        if not api_key:
            raise ConfigurationError(f"live mode needs a credential in ${api_key_env}")
        self.endpoint = endpoint
        self.models = dict(models or {})
        self.cache = cache if cache is not None else ResponseCache()
        self.retries = retries
        self.backoff = backoff
        self.limiter = limiter if limiter is not None else RateLimiter()
        self._client = client or httpx.Client(timeout=timeout)
        self._headers = {"Authorization": f"Bearer {api_key}"}
        self._sleep = sleep
        self.calls = 0

    def complete(self, request: ChatRequest) -> ChatResponse:
        messages = []
        if request.system_text:
            messages.append({"role": "system", "content": request.system_text})
        messages.append({"role": "user", "content": request.user_text})
        payload = {
            "model": self.models.get(request.model_tag, request.model_tag),
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        self.limiter.acquire()
        start = time.monotonic()
        body = _retrying_post(
            self._client,
            self.endpoint,
            payload,
            self._headers,
            retries=self.retries,
            backoff=self.backoff,
            sleep=self._sleep,
        )
        self.calls += 1
        try:
            text = body["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"unexpected response shape from {self.endpoint}") from exc
        self.cache.put(request, text)
        return ChatResponse(text, cached=False, latency_ms=int((time.monotonic() - start) * 1000))

    def stats(self) -> dict:
        return {"mode": "live", "calls": self.calls, "cache": self.cache.stats()}


class ReplayGateway(Gateway):
    """Answers from the cache; on a miss either fails (strict) or goes live."""

    def __init__(self, cache: ResponseCache, miss_policy: str = "strict", live: LiveGateway | None = None):
        if miss_policy not in ("strict", "live"):
            raise ConfigurationError(f"unknown miss policy {miss_policy!r}")
        if miss_policy == "live" and live is None:
            raise ConfigurationError("miss policy 'live' needs a live gateway")
        self.cache = cache
        self.miss_policy = miss_policy
        self.live = live

    def complete(self, request: ChatRequest) -> ChatResponse:
        key = request.key()
        text = self.cache.get(key)
        if text is not None:
            return ChatResponse(text, cached=True, latency_ms=0)
        if self.miss_policy == "strict":
            raise CacheMissError(key)
        return self.live.complete(request)

    def stats(self) -> dict:
        return {"mode": "replay", "miss_policy": self.miss_policy, "cache": self.cache.stats()}


@dataclass(frozen=True)
class StubRule:
    """``glob`` matches with fnmatch; ``regex`` searches and may use ``\\1`` in the response."""

    response: str
    glob: Optional[str] = None
    regex: Optional[str] = None
    field: str = "user"

    def apply(self, request: ChatRequest) -> Optional[str]:
        subject = {
            "user": request.user_text,
            "system": request.system_text,
            "any": request.system_text + "\n" + request.user_text,
        }[self.field]
        if self.glob is not None:
            return self.response if fnmatch.fnmatchcase(subject, self.glob) else None
        match = re.search(self.regex, subject, re.DOTALL)
        return match.expand(self.response) if match else None


class StubGateway(Gateway):
    """First matching rule wins; otherwise the sentinel text is returned."""

    def __init__(self, rules: Iterable[StubRule | tuple[str, str]] = (), sentinel: str = STUB_SENTINEL):
        self.rules = [r if isinstance(r, StubRule) else StubRule(response=r[1], glob=r[0]) for r in rules]
        self.sentinel = sentinel
        self._lock = threading.Lock()
        self.calls = 0

    @classmethod
    def from_file(cls, path: str | Path) -> "StubGateway":
        doc = json.loads(Path(path).read_text("utf-8"))
        rules = [StubRule(**r) for r in doc.get("rules", [])]
        return cls(rules, doc.get("sentinel", STUB_SENTINEL))

    def complete(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.calls += 1
        for rule in self.rules:
            text = rule.apply(request)
            if text is not None:
                return ChatResponse(text)
        return ChatResponse(self.sentinel)

    def stats(self) -> dict:
        return {"mode": "stub", "rules": len(self.rules), "calls": self.calls}


def make_gateway(config: Mapping, base_dir: Path | None = None) -> Gateway:
    """Build a gateway from the ``gateway`` section of a pipeline config."""
    base_dir = base_dir or Path.cwd()

    def resolve(p):
        return None if p is None else (base_dir / p if not Path(p).is_absolute() else Path(p))

    mode = config.get("mode", "stub")
    if mode == "stub":
        rules_path = resolve(config.get("stub_rules"))
        if rules_path is None:
            return StubGateway()
        return StubGateway.from_file(rules_path)

    cache = ResponseCache(resolve(config.get("cache")))

    def live() -> LiveGateway:
        endpoint = config.get("endpoint")
        if not endpoint:
            raise ConfigurationError("live mode needs gateway.endpoint")
        return LiveGateway(
            endpoint,
            api_key_env=config.get("api_key_env", DEFAULT_API_KEY_ENV),
            models=config.get("models"),
            cache=cache,
            retries=int(config.get("retries", 3)),
            backoff=float(config.get("backoff", 1.0)),
            limiter=RateLimiter(float(config.get("min_interval", 0.5))),
        )

    if mode == "live":
        return live()
    if mode == "replay":
        policy = config.get("miss_policy", "strict")
        return ReplayGateway(cache, policy, live() if policy == "live" else None)
    raise ConfigurationError(f"unknown gateway mode {mode!r}")
