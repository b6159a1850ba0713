"""The simulator behind an OpenAI-compatible streaming endpoint.

Routes: ``POST /v1/chat/completions`` (SSE only), ``GET /v1/models``,
``GET /health`` (both 503 until warmup has elapsed) and ``GET /metrics``
(Prometheus text, vLLM metric names).  Connections are served concurrently,
but every state change goes through one engine loop task in arrival order.
"""

from __future__ import annotations

import asyncio
import contextlib
import hashlib
import json
import logging
import threading
import time
from typing import Any, Iterator

from aiohttp import web

from ..core import NS, FinishReason, Visibility
from .engine import PLACEHOLDER_ANSWER, Engine, Phase, SimConfig, SimRequestState, estimate_prompt_tokens

log = logging.getLogger(__name__)

_WIRE_FINISH = {
    FinishReason.STOP: "stop",
    FinishReason.LENGTH_BUDGET: "length",
    FinishReason.TIMEOUT: "abort",
    FinishReason.ERROR: "abort",
}


class ServedEngine:
    """Drives an :class:`Engine` in (compressed) real time and fans tokens out to streams."""

    def __init__(self, config: SimConfig, stats_log: str | None = None):
        self.config = config
        self.engine = Engine(config)
        self.streams: dict[str, asyncio.Queue] = {}
        self.inbox: list[SimRequestState] = []
        self.wake = asyncio.Event()
        self.t0 = time.monotonic()
        self.counter = 0
        self.stats_log = stats_log
        self._logged = 0

    def sim_now(self) -> int:
        return round((time.monotonic() - self.t0) * self.config.time_compression * NS)

    def submit(self, req: SimRequestState) -> asyncio.Queue:
        queue: asyncio.Queue = asyncio.Queue()
        self.streams[req.id] = queue
        self.inbox.append(req)
        self.wake.set()
        return queue

    def _drain_inbox(self) -> None:
        if not self.inbox:
            return
        if not self.engine.running:
            self.engine.advance_to(self.sim_now())
        for req in self.inbox:
            self.engine.submit(req)
        self.inbox.clear()

    def _notify_finished(self) -> None:
        for rid in list(self.streams):
            req = self.engine.requests.get(rid)
            if req is not None and req.phase is Phase.DONE:
                self.streams.pop(rid).put_nowait(("done", req.finish_reason, req.emitted_tokens))

    def _flush_log(self) -> None:
        lines = self.engine.log_lines[self._logged :]
        self._logged = len(self.engine.log_lines)
        if not lines:
            return
        for line in lines:
            log.info("%s", line)
        if self.stats_log:
            with open(self.stats_log, "a", encoding="utf-8") as f:
                f.write("\n".join(lines) + "\n")

    async def run(self) -> None:
        eng = self.engine
        compression = self.config.time_compression
        while True:
            self._drain_inbox()
            self._notify_finished()
            if not eng.running and not (eng.waiting and eng.admit()):
                self.wake.clear()
                if not self.inbox:
                    await self.wake.wait()
                continue
            step = eng.step()
            delay = self.t0 + step.t_end / NS / compression - time.monotonic()
            await asyncio.sleep(max(delay, 0.0))
            for em in step.emissions:
                queue = self.streams.get(em.request_id)
                if queue is not None:
                    queue.put_nowait(("tokens", em.visibility, em.count))
            self._notify_finished()
            self._flush_log()

    def abort(self, request_id: str) -> None:
        self.streams.pop(request_id, None)
        self.inbox = [r for r in self.inbox if r.id != request_id]
        self.engine.abort(request_id)

    def metrics_text(self, model: str) -> str:
        eng = self.engine
        hit = eng.prefix_hit_tokens / eng.prefix_query_tokens if eng.prefix_query_tokens else 0.0
        label = f'{{model_name="{model}"}}'
        rows = [
            ("vllm:num_requests_running", "gauge", len(eng.running)),
            ("vllm:num_requests_waiting", "gauge", len(eng.waiting) + len(self.inbox)),
            ("vllm:gpu_cache_usage_perc", "gauge", eng.kv_usage()),
            ("vllm:gpu_prefix_cache_hit_rate", "gauge", hit),
            ("vllm:prompt_tokens_total", "counter", eng.prompt_tokens_total),
            ("vllm:generation_tokens_total", "counter", eng.generation_tokens_total),
        ]
        out = []
        for name, kind, value in rows:
            out.append(f"# TYPE {name} {kind}")
            out.append(f"{name}{label} {float(value)!r}")
        return "\n".join(out) + "\n"


def _token_text(config: SimConfig, req: SimRequestState, idx: int, vis: Visibility) -> dict[str, str]:
    """Delta payload for output token ``idx`` of ``req``."""
    last_reasoning = req.reasoning_tokens_planned - 1
    if vis is Visibility.REASONING:
        if config.reasoning_style == "field":
            return {"reasoning_content": "think "}
        text = "think "
        if idx == 0:
            text = "<think>" + text
        if idx == last_reasoning:
            text += "</think>"
        return {"content": text}
    if idx == req.target_output_tokens - 1 and req.natural_output_tokens <= req.target_output_tokens:
        return {"content": PLACEHOLDER_ANSWER}
    return {"content": "ok "}


def _sse(obj: Any) -> bytes:
    return b"data: " + json.dumps(obj, separators=(",", ":")).encode() + b"\n\n"


class SimServer:
    def __init__(
        self,
        config: SimConfig,
        host: str = "127.0.0.1",
        port: int = 0,
        model_name: str = "sim-model",
        stats_log: str | None = None,
    ):
        self.config = config
        self.host = host
        self.port = port
        self.model_name = model_name
        self.stats_log = stats_log
        self.served: ServedEngine | None = None
        self._runner: web.AppRunner | None = None
        self._loop_task: asyncio.Task | None = None
        self._started = 0.0

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def ready(self) -> bool:
        return time.monotonic() - self._started >= self.config.warmup

    async def start(self) -> str:
        self._started = time.monotonic()
        self.served = ServedEngine(self.config, self.stats_log)
        self._loop_task = asyncio.create_task(self.served.run())
        app = web.Application()
        app.add_routes(
            [
                web.post("/v1/chat/completions", self._chat),
                web.get("/v1/models", self._models),
                web.get("/health", self._health),
                web.get("/metrics", self._metrics),
            ]
        )
        self._runner = web.AppRunner(app, handle_signals=False)
        await self._runner.setup()
        site = web.TCPSite(self._runner, self.host, self.port)
        await site.start()
        sockets = site._server.sockets if site._server else ()  # type: ignore[union-attr]
        if sockets:
            self.port = sockets[0].getsockname()[1]
        return self.url

    async def stop(self) -> None:
        if self._loop_task is not None:
            self._loop_task.cancel()
            with contextlib.suppress(asyncio.CancelledError):
                await self._loop_task
        if self._runner is not None:
            await self._runner.cleanup()

    async def _health(self, request: web.Request) -> web.Response:
        if not self.ready():
            return web.Response(status=503, text="warming up")
        return web.Response(text="ok")

    async def _models(self, request: web.Request) -> web.Response:
        if not self.ready():
            return web.Response(status=503, text="warming up")
        return web.json_response({"object": "list", "data": [{"id": self.model_name, "object": "model"}]})

    async def _metrics(self, request: web.Request) -> web.Response:
        assert self.served is not None
        return web.Response(text=self.served.metrics_text(self.model_name), content_type="text/plain")

    async def _chat(self, request: web.Request) -> web.StreamResponse:
        if not self.ready():
            return web.Response(status=503, text="warming up")
        try:
            body = await request.json()
            messages = body["messages"]
        except (json.JSONDecodeError, KeyError, TypeError):
            return web.json_response({"error": "expected a JSON body with 'messages'"}, status=400)
        if not body.get("stream"):
            return web.json_response({"error": "only stream=true is supported"}, status=400)
        served = self.served
        assert served is not None
        cfg = self.config
        prompt_tokens = cfg.prompt_tokens or estimate_prompt_tokens(messages)
        content_key = hashlib.sha256(json.dumps(messages, sort_keys=True).encode()).hexdigest()[:16]
        rid = f"chatcmpl-{served.counter:06d}"
        served.counter += 1
        max_tokens = body.get("max_tokens")
        req = served.engine.new_request(rid, prompt_tokens, budget=max_tokens, length_key=content_key)
        queue = served.submit(req)
        include_usage = bool((body.get("stream_options") or {}).get("include_usage"))
        model = body.get("model", self.model_name)
        created = int(time.time())

        def chunk(delta: dict[str, str], finish: str | None = None) -> bytes:
            return _sse(
                {
                    "id": rid,
                    "object": "chat.completion.chunk",
                    "created": created,
                    "model": model,
                    "choices": [{"index": 0, "delta": delta, "finish_reason": finish}],
                }
            )

        resp = web.StreamResponse(headers={"Content-Type": "text/event-stream", "Cache-Control": "no-cache"})
        try:
            await resp.prepare(request)
            await resp.write(chunk({"role": "assistant", "content": ""}))
            idx = 0
            while True:
                kind, a, b = await queue.get()
                if kind == "tokens":
                    payload = bytearray()
                    for _ in range(b):
                        payload += chunk(_token_text(cfg, req, idx, a))
                        idx += 1
                    await resp.write(bytes(payload))
                    continue
                await resp.write(chunk({}, _WIRE_FINISH[a]))
                if include_usage:
                    await resp.write(
                        _sse(
                            {
                                "id": rid,
                                "object": "chat.completion.chunk",
                                "created": created,
                                "model": model,
                                "choices": [],
                                "usage": {
                                    "prompt_tokens": prompt_tokens,
                                    "completion_tokens": b,
                                    "total_tokens": prompt_tokens + b,
                                },
                            }
                        )
                    )
                await resp.write(b"data: [DONE]\n\n")
                break
        except (ConnectionResetError, asyncio.CancelledError):
            served.abort(rid)
            raise
        await resp.write_eof()
        return resp


@contextlib.contextmanager
def serve_in_thread(config: SimConfig, **kwargs: Any) -> Iterator[SimServer]:
    """Run a :class:`SimServer` on a private event loop in a daemon thread."""
    server = SimServer(config, **kwargs)
    loop = asyncio.new_event_loop()
    started = threading.Event()
    failure: list[BaseException] = []

    def runner() -> None:
        asyncio.set_event_loop(loop)
        try:
            loop.run_until_complete(server.start())
        except BaseException as exc:  # surfaced to the caller below
            failure.append(exc)
            started.set()
            return
        started.set()
        loop.run_forever()

    thread = threading.Thread(target=runner, name="sim-server", daemon=True)
    thread.start()
    started.wait()
    if failure:
        raise failure[0]
    try:
        yield server
    finally:
        asyncio.run_coroutine_threadsafe(server.stop(), loop).result(timeout=10)
        loop.call_soon_threadsafe(loop.stop)
        thread.join(timeout=10)
        loop.close()


async def serve_forever(config: SimConfig, host: str, port: int, **kwargs: Any) -> None:
    server = SimServer(config, host=host, port=port, **kwargs)
    url = await server.start()
    log.info("simulator listening on %s", url)
    print(f"simulator listening on {url}", flush=True)
    try:
        await asyncio.Event().wait()
    finally:
        await server.stop()
