"""Real-time streaming endpoint around one model bundle.

Leader wrist positions arrive as newline-delimited JSON over TCP (and,
for the browser UI, over WebSocket); a fixed-rate tick loop runs the
observation-driven coupled step plus the intent recognizer and emits
follower commands. The protocol logic lives in Session, free of any IO,
so the same code path is exercised by sockets and in-process tests.
"""

from __future__ import annotations

import asyncio
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .bundle import ModelBundle
from .cds import InteractionState, cds_step, initial_state
from .errors import InputError, ProtocolError
from .recognition import (
    CausalVelocityEstimator,
    IntentLabel,
    StreamClassifier,
)
from .seds import State
from .wire import (
    ErrorReply,
    FollowerCommand,
    Hello,
    LeaderSample,
    Reset,
    WireMessage,
    decode_message,
    encode_message,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ServiceConfig:
    tick_hz: float = 50.0
    stale_timeout: float = 0.5   # seconds without a fresh leader sample

    def __post_init__(self):
        if self.tick_hz <= 0.0:
            raise InputError("tick_hz must be positive")


class Session:
    """Protocol state machine for one connection.

    Feed inbound lines through handle_line(); call tick() at the service
    rate to obtain the outbound follower command. While the recognizer
    reports Other the follower holds its position (the coupling is gated
    off); once a handover is recognized the configured coupling gains
    apply.
    """

    def __init__(self, bundle: ModelBundle,
                 config: ServiceConfig = ServiceConfig()):
        self.bundle = bundle
        self.config = config
        self.dt = 1.0 / config.tick_hz
        self._estimator = CausalVelocityEstimator()
        self._classifier = StreamClassifier(bundle.system.master,
                                            bundle.recognizer)
        self._reset_motion()
        self.closed = False

    def _reset_motion(self) -> None:
        system = self.bundle.system
        self._interaction = initial_state(
            system,
            master_start=np.zeros(system.master.dim),
            slave_start=self.bundle.follower_rest.copy(),
        )
        self._latest: Optional[LeaderSample] = None
        self._latest_rx: float = -np.inf
        self._last_fed_t: float = -np.inf
        self._intent = IntentLabel.OTHER
        self._tick_count = 0

    def reset(self) -> None:
        self._estimator.reset()
        self._classifier.reset()
        self._reset_motion()

    def handle_line(self, line) -> tuple[list[str], bool]:
        """Process one inbound line; returns (replies, close_session)."""
        try:
            msg = decode_message(line)
        except ProtocolError as exc:
            return [encode_message(ErrorReply(str(exc)))], False
        return self.handle_message(msg)

    def handle_message(self, msg: WireMessage) -> tuple[list[str], bool]:
        if isinstance(msg, Hello):
            if msg.model_version != self.bundle.model_version:
                reply = ErrorReply(
                    f"model version mismatch: server has "
                    f"{self.bundle.model_version}"
                )
                self.closed = True
                return [encode_message(reply)], True
            return [encode_message(Hello(self.bundle.model_version))], False
        if isinstance(msg, Reset):
            self.reset()
            return [], False
        if isinstance(msg, LeaderSample):
            if self._latest is not None and msg.t <= self._latest.t:
                return [
                    encode_message(ErrorReply(
                        f"out-of-order sample t={msg.t:.6g}"
                    ))
                ], False
            self._latest = msg  # latest-sample-wins between ticks
            return [], False
        return [encode_message(ErrorReply("unsupported inbound message"))], False

    def note_rx_time(self, now: float) -> None:
        self._latest_rx = now

    def tick(self, now: float) -> FollowerCommand:
        """Advance one control period and emit the follower command."""
        system = self.bundle.system
        self._tick_count += 1
        t_out = self._tick_count * self.dt

        stale = (
            self._latest is None
            or (now - self._latest_rx) > self.config.stale_timeout
        )
        if self._latest is not None and self._latest.t > self._last_fed_t:
            sample = self._estimator.update(
                self._latest.t, np.array([self._latest.y, self._latest.z])
            )
            self._intent = self._classifier.update(self._latest.t,
                                                   sample).label
            self._last_fed_t = self._latest.t
            master_pos = sample.position
        else:
            master_pos = self._interaction.master.position

        engaged = self._intent is IntentLabel.HANDOVER and not stale
        if engaged:
            self._interaction = cds_step(
                system, self._interaction, self.dt,
                master_override=master_pos,
            )
        else:
            # hold posture: zero commanded velocity, master tracked only
            target = system.infer_slave_target(master_pos)
            self._interaction = InteractionState(
                master=State(master_pos, np.zeros_like(master_pos)),
                slave=State(self._interaction.slave.position,
                            np.zeros_like(master_pos)),
                inferred_target=target,
                t=self._interaction.t + self.dt,
            )

        slave = self._interaction.slave
        target = self._interaction.inferred_target
        intent = "handover" if self._intent is IntentLabel.HANDOVER \
            else "other"
        if stale:
            intent = "other"
        return FollowerCommand(
            t=t_out,
            y=float(slave.position[0]),
            z=float(slave.position[1]),
            vy=float(slave.velocity[0]),
            vz=float(slave.velocity[1]),
            intent=intent,
            target_y=float(target[0]),
            target_z=float(target[1]),
            stale=bool(stale),
        )


def replay_offline(
    bundle: ModelBundle,
    samples,
    config: ServiceConfig = ServiceConfig(),
) -> list[FollowerCommand]:
    """Drive a Session with a simulated clock, one sample per tick.

    ``samples`` yields (t, y, z) leader observations; the returned list
    holds one follower command per tick, exactly as the live service
    would emit them.
    """
    session = Session(bundle, config)
    period = 1.0 / config.tick_hz
    commands = []
    now = 0.0
    for t, y, z in samples:
        now += period
        replies, _ = session.handle_message(
            LeaderSample(t=float(t), y=float(y), z=float(z))
        )
        if replies:
            raise ProtocolError(f"replay rejected: {replies[0].strip()}")
        session.note_rx_time(now)
        commands.append(session.tick(now))
    return commands


class StreamService:
    """Asyncio front end: TCP listener, optional WebSocket + static UI."""

    def __init__(self, bundle: ModelBundle,
                 config: ServiceConfig = ServiceConfig(),
                 ui_dir: Optional[str] = None):
        self.bundle = bundle
        self.config = config
        self.ui_dir = Path(ui_dir) if ui_dir else None
        self._tcp_server = None
        self._ws_server = None

    async def start_tcp(self, host: str, port: int) -> tuple[str, int]:
        self._tcp_server = await asyncio.start_server(
            self._handle_tcp, host, port
        )
        addr = self._tcp_server.sockets[0].getsockname()
        log.info("tcp listener on %s:%d", addr[0], addr[1])
        return addr[0], addr[1]

    async def start_ws(self, host: str, port: int) -> tuple[str, int]:
        import websockets

        self._ws_server = await websockets.serve(
            self._handle_ws, host, port,
            process_request=self._serve_static,
        )
        sock = next(iter(self._ws_server.sockets))
        addr = sock.getsockname()
        log.info("websocket listener on %s:%d", addr[0], addr[1])
        return addr[0], addr[1]

    async def close(self) -> None:
        for server in (self._tcp_server, self._ws_server):
            if server is not None:
                server.close()
        if self._tcp_server is not None:
            await self._tcp_server.wait_closed()

    async def _tick_loop(self, session: Session, send) -> None:
        loop = asyncio.get_running_loop()
        period = 1.0 / self.config.tick_hz
        next_tick = loop.time() + period
        while True:
            delay = next_tick - loop.time()
            if delay > 0:
                await asyncio.sleep(delay)
            command = session.tick(loop.time())
            await send(encode_message(command))
            next_tick += period
            if next_tick < loop.time() - 1.0:
                # fell badly behind (suspended host); resync
                next_tick = loop.time() + period

    async def _handle_tcp(self, reader: asyncio.StreamReader,
                          writer: asyncio.StreamWriter) -> None:
        import socket as socket_module

        sock = writer.get_extra_info("socket")
        if sock is not None:
            sock.setsockopt(socket_module.IPPROTO_TCP,
                            socket_module.TCP_NODELAY, 1)
        session = Session(self.bundle, self.config)
        loop = asyncio.get_running_loop()

        async def send(text: str) -> None:
            writer.write(text.encode("utf-8"))

        ticker = asyncio.create_task(self._tick_loop(session, send))
        try:
            pending = 0
            while True:
                line = await reader.readline()
                if not line:
                    break
                replies, close = session.handle_line(line)
                session.note_rx_time(loop.time())
                for reply in replies:
                    writer.write(reply.encode("utf-8"))
                pending += 1
                if pending >= 512:
                    await writer.drain()
                    pending = 0
                if close:
                    break
        except (ConnectionResetError, asyncio.IncompleteReadError):
            pass
        finally:
            ticker.cancel()
            try:
                await writer.drain()
                writer.close()
                await writer.wait_closed()
            except (ConnectionResetError, BrokenPipeError, OSError):
                pass

    async def _handle_ws(self, websocket) -> None:
        session = Session(self.bundle, self.config)
        loop = asyncio.get_running_loop()

        async def send(text: str) -> None:
            await websocket.send(text)

        ticker = asyncio.create_task(self._tick_loop(session, send))
        try:
            async for raw in websocket:
                replies, close = session.handle_line(raw)
                session.note_rx_time(loop.time())
                for reply in replies:
                    await websocket.send(reply)
                if close:
                    await websocket.close()
                    break
        except Exception:
            pass
        finally:
            ticker.cancel()

    async def _serve_static(self, connection, request):
        """Serve the UI bundle on plain GET requests; WS upgrades pass."""
        if self.ui_dir is None:
            return None
        upgrade = request.headers.get("Upgrade", "")
        if upgrade.lower() == "websocket":
            return None
        from websockets.datastructures import Headers
        from websockets.http11 import Response

        path = request.path.split("?")[0]
        if path.endswith("/"):
            path += "index.html"
        target = (self.ui_dir / path.lstrip("/")).resolve()
        try:
            target.relative_to(self.ui_dir.resolve())
        except ValueError:
            return connection.respond(403, "forbidden\n")
        if not target.is_file():
            return connection.respond(404, "not found\n")
        content_types = {
            ".html": "text/html",
            ".js": "text/javascript",
            ".css": "text/css",
            ".map": "application/json",
            ".svg": "image/svg+xml",
        }
        body = target.read_bytes()
        headers = Headers()
        headers["Content-Type"] = content_types.get(
            target.suffix, "application/octet-stream"
        )
        headers["Content-Length"] = str(len(body))
        return Response(200, "OK", headers, body)


async def serve_forever(
    bundle: ModelBundle,
    listen: Optional[tuple[str, int]],
    ws_listen: Optional[tuple[str, int]] = None,
    config: ServiceConfig = ServiceConfig(),
    ui_dir: Optional[str] = None,
    ready_callback=None,
) -> None:
    service = StreamService(bundle, config, ui_dir=ui_dir)
    bound = {}
    if listen is not None:
        bound["tcp"] = await service.start_tcp(*listen)
    if ws_listen is not None:
        bound["ws"] = await service.start_ws(*ws_listen)
    if ready_callback is not None:
        ready_callback(bound)
    await asyncio.Event().wait()
