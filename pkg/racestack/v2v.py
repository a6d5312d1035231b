"""
Vehicle-to-vehicle state exchange and conflict-zone arbitration

Messages travel as newline-delimited JSON. Every endpoint keeps a latest-wins
mailbox per sender; the simulator uses an in-process LoopbackBus with
injectable loss/latency/blackout, real deployments the Flask push/pull server
and its requests-based client.
"""

import json
import logging
import math
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import requests
from flask import Flask, Response, jsonify, request
from werkzeug.serving import make_server

from .config import config
from .core import ControlCommand, Pose2D, VehicleState, to_local_frame
from .errors import ParseError, V2VConnectionRefused, V2VTimeout, VersionMismatch
from .plan_pursuit import PurePursuitTracker

logger = logging.getLogger(__name__)

REQUIRED_FIELDS = ('sender_id', 'ts', 'objects', 'intent', 'safe')
NDJSON = 'application/x-ndjson'


class Intent(str, Enum):
    ENTER = 'ENTER'
    YIELD = 'YIELD'
    INSIDE = 'INSIDE'
    EXIT = 'EXIT'


class ObjectEntry(NamedTuple):
    peer_id: int
    rel_x: float  # meters, sender frame
    rel_y: float


@dataclass(frozen=True)
class V2VMessage:
    sender_id: int
    ts: float
    objects: Tuple[ObjectEntry, ...] = ()
    intent: Intent = Intent.ENTER
    safe: bool = False

    def __post_init__(self):
        objects = tuple(ObjectEntry(int(o[0]), float(o[1]), float(o[2])) for o in self.objects)
        object.__setattr__(self, 'objects', objects)
        object.__setattr__(self, 'ts', float(self.ts))
        object.__setattr__(self, 'intent', Intent(self.intent))
        if any(o.peer_id == self.sender_id for o in objects):
            raise ValueError(f"Sender {self.sender_id} must not list itself as an object")


@dataclass(frozen=True)
class ConflictZone:
    center: Pose2D
    entry_radius: float
    inner_radius: float
    capacity: int = 1

    def __post_init__(self):
        if not 0 < self.inner_radius < self.entry_radius:
            raise ValueError("Conflict zone needs 0 < inner_radius < entry_radius")
        if self.capacity < 1:
            raise ValueError("Conflict zone capacity must be >= 1")

    def distance(self, x: float, y: float) -> float:
        return math.hypot(x - self.center.x, y - self.center.y)

    def contains(self, x: float, y: float) -> bool:
        return self.distance(x, y) < self.entry_radius


# ---------------------------------------------------------------------------
# Wire codec
# ---------------------------------------------------------------------------

def encode(msg: V2VMessage) -> bytes:
    payload = {
        'sender_id': msg.sender_id,
        'ts': msg.ts,
        'objects': [[o.peer_id, o.rel_x, o.rel_y] for o in msg.objects],
        'intent': msg.intent.value,
        'safe': msg.safe,
    }
    return json.dumps(payload, separators=(',', ':'), allow_nan=False).encode() + b'\n'


def _is_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value) -> bool:
    return (isinstance(value, (int, float)) and not isinstance(value, bool)
            and math.isfinite(value))


def decode(data: Union[bytes, str]) -> V2VMessage:
    """Parse one message line; unknown fields are ignored"""
    if isinstance(data, str):
        data = data.encode('utf-8', errors='surrogatepass')
    if data.endswith(b'\n'):
        data = data[:-1]
    if b'\n' in data:
        raise ParseError("Expected exactly one message line")
    try:
        obj = json.loads(data)
    except (ValueError, RecursionError) as e:
        raise ParseError(f"Malformed message: {e}")
    if not isinstance(obj, dict):
        raise ParseError("Message must be a JSON object")

    missing = [name for name in REQUIRED_FIELDS if name not in obj]
    if missing:
        raise VersionMismatch(f"Message lacks required fields: {', '.join(missing)}")

    sender, ts, objects, intent, safe = (obj[name] for name in REQUIRED_FIELDS)
    if not _is_int(sender):
        raise ParseError("sender_id must be an integer")
    if not _is_number(ts):
        raise ParseError("ts must be a finite number")
    if not isinstance(objects, list):
        raise ParseError("objects must be an array")
    entries = []
    for item in objects:
        if (not isinstance(item, list) or len(item) != 3 or not _is_int(item[0])
                or not _is_number(item[1]) or not _is_number(item[2])):
            raise ParseError("objects entries must be [id, x, y]")
        if item[0] == sender:
            raise ParseError("Sender listed in its own object list")
        entries.append(ObjectEntry(item[0], float(item[1]), float(item[2])))
    if not isinstance(intent, str) or intent not in Intent.__members__:
        raise ParseError(f"Unknown intent {intent!r}")
    if not isinstance(safe, bool):
        raise ParseError("safe must be a boolean")
    return V2VMessage(sender, float(ts), tuple(entries), Intent(intent), safe)


class LineDecoder:
    """Incremental NDJSON decoder that skips bad lines and resumes at the next newline"""

    def __init__(self):
        self._buffer = b''
        self.errors: List[ParseError] = []

    def feed(self, data: bytes) -> List[V2VMessage]:
        self._buffer += data
        *lines, self._buffer = self._buffer.split(b'\n')
        messages = []
        for line in lines:
            if not line.strip():
                continue
            try:
                messages.append(decode(line))
            except ParseError as e:
                logger.warning(f"Dropping malformed V2V line: {e}")
                self.errors.append(e)
        return messages


# ---------------------------------------------------------------------------
# Mailbox and endpoints
# ---------------------------------------------------------------------------

class Mailbox:
    """Latest message per sender; the single synchronization point"""

    def __init__(self, staleness_window: float = 0.5):
        self.staleness_window = staleness_window
        self._latest: Dict[int, V2VMessage] = {}
        self._lock = threading.Lock()

    def put(self, msg: V2VMessage) -> bool:
        with self._lock:
            current = self._latest.get(msg.sender_id)
            if current is not None and msg.ts < current.ts:
                return False
            self._latest[msg.sender_id] = msg
            return True

    def latest(self, since_ts: float = -math.inf, now: Optional[float] = None) -> List[V2VMessage]:
        with self._lock:
            messages = list(self._latest.values())
        result = [m for m in messages if m.ts > since_ts
                  and (now is None or now - m.ts <= self.staleness_window)]
        return sorted(result, key=lambda m: m.sender_id)

    def __len__(self):
        with self._lock:
            return len(self._latest)


class LoopbackBus:
    """In-process endpoint with deterministic loss, latency and blackout injection"""

    def __init__(self, staleness_window: float = 0.5, loss: float = 0.0, latency: float = 0.0,
                 blackout: bool = False, rng: Optional[np.random.Generator] = None):
        if not 0.0 <= loss <= 1.0:
            raise ValueError(f"loss must lie in [0, 1], got {loss}")
        if latency < 0:
            raise ValueError(f"latency must be >= 0, got {latency}")
        self.mailbox = Mailbox(staleness_window)
        self.loss = loss
        self.latency = latency
        self.blackout = blackout
        self.rng = rng or np.random.default_rng(0)
        self._pending: List[Tuple[float, V2VMessage]] = []
        self._lock = threading.Lock()

    def publish_state(self, msg: V2VMessage) -> None:
        if self.blackout:
            return
        if self.loss > 0.0 and self.rng.random() < self.loss:
            logger.debug(f"V2V message from {msg.sender_id} at t={msg.ts:.2f} lost")
            return
        if self.latency > 0.0:
            with self._lock:
                self._pending.append((msg.ts + self.latency, msg))
        else:
            self.mailbox.put(msg)

    def _deliver(self, now: Optional[float]) -> None:
        with self._lock:
            due = [(t, m) for t, m in self._pending if now is None or t <= now]
            self._pending = [(t, m) for t, m in self._pending if not (now is None or t <= now)]
        for _, msg in due:
            self.mailbox.put(msg)

    def fetch_peers(self, since_ts: float = -math.inf,
                    now: Optional[float] = None) -> List[V2VMessage]:
        if self.blackout:
            raise V2VTimeout("V2V channel blacked out")
        self._deliver(now)
        return self.mailbox.latest(since_ts, now)


def publish_state(endpoint, msg: V2VMessage) -> None:
    endpoint.publish_state(msg)


def fetch_peers(endpoint, since_ts: float = -math.inf,
                now: Optional[float] = None) -> List[V2VMessage]:
    return endpoint.fetch_peers(since_ts, now)


def create_v2v_app(mailbox: Optional[Mailbox] = None) -> Flask:
    """Flask push/pull endpoint backed by one mailbox"""
    app = Flask(__name__)
    app.config['MAILBOX'] = mailbox or Mailbox(config.v2v_staleness_window)

    @app.route('/v2v/health')
    def health():
        return jsonify({'status': 'healthy', 'senders': len(app.config['MAILBOX'])})

    @app.route('/v2v/publish', methods=['POST'])
    def publish():
        decoder = LineDecoder()
        messages = decoder.feed(request.get_data() + b'\n')
        if decoder.errors:
            return jsonify({'error': str(decoder.errors[0])}), 400
        accepted = sum(1 for m in messages if app.config['MAILBOX'].put(m))
        return jsonify({'accepted': accepted, 'received': len(messages)})

    @app.route('/v2v/peers')
    def peers():
        try:
            since = float(request.args.get('since', '-inf'))
            now = request.args.get('now')
            now = float(now) if now is not None else None
        except ValueError:
            return jsonify({'error': 'since and now must be numbers'}), 400
        body = b''.join(encode(m) for m in app.config['MAILBOX'].latest(since, now))
        return Response(body, mimetype=NDJSON)

    return app


class V2VServer:
    """Background werkzeug server for the push/pull endpoint"""

    def __init__(self, host: Optional[str] = None, port: Optional[int] = None,
                 mailbox: Optional[Mailbox] = None):
        self.host = host or config.v2v_host
        self.requested_port = config.v2v_port if port is None else port
        self.mailbox = mailbox or Mailbox(config.v2v_staleness_window)
        self.app = create_v2v_app(self.mailbox)
        self._server = None
        self._thread = None

    @property
    def port(self) -> Optional[int]:
        return self._server.server_port if self._server else None

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def start(self) -> bool:
        if self.is_running():
            return True
        self._server = make_server(self.host, self.requested_port, self.app, threaded=True)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True,
                                        name='v2v-server')
        self._thread.start()
        logger.info(f"V2V server listening on {self.url}")
        return True

    def stop(self) -> bool:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._thread.join(timeout=5)
            logger.info("V2V server stopped")
            self._server = None
            self._thread = None
        return True

    def is_running(self) -> bool:
        return self._thread is not None and self._thread.is_alive()

    def get_status(self) -> dict:
        return {'running': self.is_running(), 'host': self.host, 'port': self.port,
                'senders': len(self.mailbox)}

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.stop()


class V2VClient:
    """requests-based push/pull client for a V2VServer"""

    def __init__(self, base_url: str, timeout: Optional[float] = None):
        self.base_url = base_url.rstrip('/')
        self.timeout = config.v2v_timeout if timeout is None else timeout
        self.session = requests.Session()
        logger.info(f"V2V client initialized for: {self.base_url}")

    def _request(self, method: str, endpoint: str, **kwargs) -> requests.Response:
        url = f"{self.base_url}{endpoint}"
        try:
            response = self.session.request(method, url, timeout=self.timeout, **kwargs)
        except requests.exceptions.Timeout as e:
            raise V2VTimeout(f"V2V request timed out: {method} {url}") from e
        except requests.exceptions.ConnectionError as e:
            raise V2VConnectionRefused(f"V2V peer unreachable: {method} {url}") from e
        if response.status_code == 400:
            raise ParseError(response.json().get('error', 'rejected by peer'))
        response.raise_for_status()
        return response

    def publish_state(self, msg: V2VMessage) -> None:
        self._request('POST', '/v2v/publish', data=encode(msg),
                      headers={'Content-Type': NDJSON})

    def fetch_peers(self, since_ts: float = -math.inf,
                    now: Optional[float] = None) -> List[V2VMessage]:
        params = {'since': repr(float(since_ts))}
        if now is not None:
            params['now'] = repr(float(now))
        response = self._request('GET', '/v2v/peers', params=params)
        return LineDecoder().feed(response.content)

    def close(self):
        self.session.close()


# ---------------------------------------------------------------------------
# Arbitration
# ---------------------------------------------------------------------------

def safe_to_proceed(ego_id: int, ego_intent: Intent, peers: Iterable[V2VMessage],
                    zone: ConflictZone) -> bool:
    """Indicator for an entry request: no peer inside, and fewer than capacity
    lower-id peers also asking to enter"""
    others = [m for m in peers if m.sender_id != ego_id]
    if any(m.intent == Intent.INSIDE for m in others):
        return False
    ahead = sum(1 for m in others if m.intent == Intent.ENTER and m.sender_id < ego_id)
    return ahead < zone.capacity


def object_list(ego_id: int, ego_pose: Pose2D,
                others: Iterable[Tuple[int, Pose2D]]) -> Tuple[ObjectEntry, ...]:
    entries = []
    for peer_id, pose in others:
        if peer_id == ego_id:
            continue
        rel = to_local_frame(ego_pose, pose)
        entries.append(ObjectEntry(peer_id, rel.x, rel.y))
    return tuple(entries)


class RoundaboutController:
    """Pure pursuit along a fixed approach/circulate/exit path, gated by V2V arbitration"""

    def __init__(self, vehicle_id: int, tracker: PurePursuitTracker, zone: ConflictZone,
                 roster: Sequence[int] = (), stop_margin: float = 0.2, stop_decel: float = 2.0):
        self.vehicle_id = vehicle_id
        self.tracker = tracker
        self.zone = zone
        self.roster = tuple(r for r in roster if r != vehicle_id)
        self.stop_margin = stop_margin
        self.stop_decel = stop_decel
        self.intent = Intent.ENTER
        self.safe = False
        self.committed = False
        self._been_inside = False

    def update_intent(self, pose: Pose2D) -> Intent:
        inside = self.zone.contains(pose.x, pose.y)
        if inside:
            self._been_inside = True
            self.intent = Intent.INSIDE
        elif self._been_inside:
            self.intent = Intent.EXIT
        else:
            self.intent = Intent.ENTER
        return self.intent

    def command(self, state: VehicleState, peers: Optional[Sequence[V2VMessage]]) -> ControlCommand:
        """peers is None when the channel failed; unknown peers always mean yield"""
        intent = self.update_intent(state.pose)
        cmd = self.tracker.command(state.pose)
        if intent != Intent.ENTER:
            self.safe = True
            return cmd

        if peers is None:
            self.safe = False
        else:
            heard = {m.sender_id for m in peers}
            unknown = [r for r in self.roster if r not in heard]
            self.safe = not unknown and safe_to_proceed(self.vehicle_id, intent, peers, self.zone)

        dist_to_line = self.zone.distance(state.pose.x, state.pose.y) - (
            self.zone.entry_radius + self.stop_margin)
        if self.safe:
            if dist_to_line <= 0.0:
                self.committed = True
            return cmd
        if self.committed:
            return cmd

        limit = math.sqrt(2.0 * self.stop_decel * max(dist_to_line, 0.0))
        if limit < cmd.speed:
            return ControlCommand(limit, cmd.kappa)
        return cmd

    def message(self, now: float, others: Iterable[Tuple[int, Pose2D]],
                pose: Pose2D) -> V2VMessage:
        return V2VMessage(self.vehicle_id, now, object_list(self.vehicle_id, pose, others),
                          self.intent, self.safe)
