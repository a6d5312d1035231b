"""Tests for the V2V codec, mailboxes, transports and arbitration"""

import json
import math
import unittest
from unittest.mock import MagicMock, patch

import numpy as np
import pytest
import requests
from hypothesis import given
from hypothesis import strategies as st

from racestack.core import Pose2D, VehicleState, WaypointPath
from racestack.errors import ParseError, V2VConnectionRefused, V2VTimeout, VersionMismatch
from racestack.plan_pursuit import PurePursuitTracker, PursuitConfig
from racestack.v2v import (
    ConflictZone, Intent, LineDecoder, LoopbackBus, Mailbox, ObjectEntry, RoundaboutController,
    V2VClient, V2VMessage, V2VServer, decode, encode, fetch_peers, object_list, publish_state,
    safe_to_proceed,
)

ZONE = ConflictZone(Pose2D(0.0, 0.0, 0.0), entry_radius=2.2, inner_radius=1.0)


def msg(sender, ts=0.0, intent=Intent.ENTER, objects=(), safe=False):
    return V2VMessage(sender, ts, objects, intent, safe)


finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@st.composite
def messages(draw):
    sender = draw(st.integers(-1000, 1000))
    ids = draw(st.lists(st.integers(-1000, 1000).filter(lambda i: i != sender), max_size=5))
    objects = tuple(ObjectEntry(i, draw(finite), draw(finite)) for i in ids)
    return V2VMessage(sender, draw(finite), objects, draw(st.sampled_from(list(Intent))),
                      draw(st.booleans()))


class TestCodec:
    @given(messages())
    def test_decode_inverts_encode(self, message):
        assert decode(encode(message)) == message

    @given(st.binary(max_size=200))
    def test_decode_is_total_on_bytes(self, data):
        try:
            result = decode(data)
        except ParseError:
            return
        assert isinstance(result, V2VMessage)

    @given(st.recursive(st.none() | st.booleans() | st.integers() | finite | st.text(max_size=5),
                        lambda children: st.lists(children, max_size=3)
                        | st.dictionaries(st.text(max_size=8), children, max_size=4),
                        max_leaves=12))
    def test_decode_is_total_on_json(self, value):
        try:
            decode(json.dumps(value))
        except ParseError:
            pass

    def test_encoding_is_one_compact_line(self):
        line = encode(msg(3, 1.5, Intent.INSIDE, [(4, 1.0, -2.0)], True))
        assert line.endswith(b'\n') and line.count(b'\n') == 1
        assert b' ' not in line
        assert json.loads(line) == {'sender_id': 3, 'ts': 1.5, 'objects': [[4, 1.0, -2.0]],
                                    'intent': 'INSIDE', 'safe': True}

    def test_missing_field_is_version_mismatch(self):
        with pytest.raises(VersionMismatch):
            decode(b'{"sender_id": 1, "ts": 0.0, "objects": [], "intent": "ENTER"}')

    def test_unknown_fields_are_ignored(self):
        line = b'{"sender_id":1,"ts":0.5,"objects":[],"intent":"EXIT","safe":true,"extra":9}'
        assert decode(line) == msg(1, 0.5, Intent.EXIT, safe=True)

    @pytest.mark.parametrize('line', [
        b'not json',
        b'[1, 2, 3]',
        b'{"sender_id":"1","ts":0,"objects":[],"intent":"ENTER","safe":false}',
        b'{"sender_id":1,"ts":NaN,"objects":[],"intent":"ENTER","safe":false}',
        b'{"sender_id":1,"ts":0,"objects":[[1,0,0]],"intent":"ENTER","safe":false}',
        b'{"sender_id":1,"ts":0,"objects":[[2,0]],"intent":"ENTER","safe":false}',
        b'{"sender_id":1,"ts":0,"objects":[],"intent":"MERGE","safe":false}',
        b'{"sender_id":1,"ts":0,"objects":[],"intent":"ENTER","safe":1}',
        b'{"sender_id":true,"ts":0,"objects":[],"intent":"ENTER","safe":false}',
        b'{"a":1}\n{"b":2}',
    ])
    def test_rejects_malformed(self, line):
        with pytest.raises(ParseError):
            decode(line)

    def test_sender_cannot_list_itself(self):
        with pytest.raises(ValueError):
            V2VMessage(1, 0.0, ((1, 0.0, 0.0),))

    def test_line_decoder_resumes_after_bad_line(self):
        decoder = LineDecoder()
        good = encode(msg(1, 0.1))
        stream = good + b'garbage\n' + encode(msg(2, 0.2))[:-1]
        first = decoder.feed(stream[:len(good) + 4])
        rest = decoder.feed(stream[len(good) + 4:])
        assert [m.sender_id for m in first] == [1]
        assert rest == []
        assert len(decoder.errors) == 1
        assert [m.sender_id for m in decoder.feed(b'\n')] == [2]


class TestMailbox:
    def test_latest_wins_and_rejects_older(self, mailbox):
        assert mailbox.put(msg(1, 1.0))
        assert not mailbox.put(msg(1, 0.5))
        assert mailbox.put(msg(1, 1.0, Intent.INSIDE))
        assert mailbox.latest() == [msg(1, 1.0, Intent.INSIDE)]

    def test_since_and_staleness(self, mailbox):
        mailbox.put(msg(2, 1.0))
        mailbox.put(msg(1, 2.0))
        assert [m.sender_id for m in mailbox.latest()] == [1, 2]
        assert [m.sender_id for m in mailbox.latest(since_ts=1.0)] == [1]
        assert [m.sender_id for m in mailbox.latest(now=2.2)] == [1]
        assert [m.sender_id for m in mailbox.latest(now=1.5)] == [1, 2]


class TestLoopbackBus:
    def test_delivery(self):
        bus = LoopbackBus()
        publish_state(bus, msg(1, 0.0))
        assert fetch_peers(bus, now=0.0) == [msg(1, 0.0)]

    def test_total_loss(self):
        bus = LoopbackBus(loss=1.0)
        for t in range(10):
            bus.publish_state(msg(1, t * 0.05))
        assert bus.fetch_peers() == []

    def test_partial_loss_is_seeded(self):
        def delivered(seed):
            bus = LoopbackBus(loss=0.5, rng=np.random.default_rng(seed))
            count = 0
            for t in range(200):
                bus.publish_state(msg(1, float(t)))
                count += bool(bus.fetch_peers(since_ts=t - 0.5))
            return count

        assert delivered(4) == delivered(4)
        assert 50 < delivered(4) < 150

    def test_latency(self):
        bus = LoopbackBus(latency=0.1)
        bus.publish_state(msg(1, 1.0))
        assert bus.fetch_peers(now=1.05) == []
        assert bus.fetch_peers(now=1.1) == [msg(1, 1.0)]

    def test_blackout(self):
        bus = LoopbackBus(blackout=True)
        bus.publish_state(msg(1, 0.0))
        with pytest.raises(V2VTimeout):
            bus.fetch_peers()

    def test_invalid_settings(self):
        with pytest.raises(ValueError):
            LoopbackBus(loss=1.5)
        with pytest.raises(ValueError):
            LoopbackBus(latency=-1.0)


class TestFlaskEndpoint:
    def test_health(self, client):
        response = client.get('/v2v/health')
        assert response.status_code == 200
        assert response.json == {'status': 'healthy', 'senders': 0}

    def test_publish_then_fetch(self, client, mailbox):
        response = client.post('/v2v/publish', data=encode(msg(2, 1.0, Intent.YIELD)))
        assert response.status_code == 200
        assert response.json == {'accepted': 1, 'received': 1}
        assert len(mailbox) == 1

        response = client.get('/v2v/peers?since=0.5&now=1.2')
        assert response.mimetype == 'application/x-ndjson'
        assert LineDecoder().feed(response.data) == [msg(2, 1.0, Intent.YIELD)]

    def test_publish_rejects_garbage(self, client):
        response = client.post('/v2v/publish', data=b'{"sender_id":1}')
        assert response.status_code == 400
        assert 'error' in response.json

    def test_peers_rejects_bad_query(self, client):
        assert client.get('/v2v/peers?since=yesterday').status_code == 400


class TestV2VClient(unittest.TestCase):
    def setUp(self):
        self.client = V2VClient('http://v2v.test:8765/', timeout=0.1)

    @patch('racestack.v2v.requests.Session.request')
    def test_timeout_maps_to_v2v_timeout(self, mock_request):
        mock_request.side_effect = requests.exceptions.Timeout()
        with self.assertRaises(V2VTimeout):
            self.client.fetch_peers()

    @patch('racestack.v2v.requests.Session.request')
    def test_connection_error_maps_to_refused(self, mock_request):
        mock_request.side_effect = requests.exceptions.ConnectionError()
        with self.assertRaises(V2VConnectionRefused):
            self.client.publish_state(msg(1, 0.0))

    @patch('racestack.v2v.requests.Session.request')
    def test_bad_request_maps_to_parse_error(self, mock_request):
        response = MagicMock(status_code=400)
        response.json.return_value = {'error': 'Malformed message'}
        mock_request.return_value = response
        with self.assertRaises(ParseError):
            self.client.publish_state(msg(1, 0.0))

    @patch('racestack.v2v.requests.Session.request')
    def test_fetch_sends_window_and_decodes(self, mock_request):
        response = MagicMock(status_code=200, content=encode(msg(4, 2.0)))
        mock_request.return_value = response
        peers = self.client.fetch_peers(since_ts=1.0, now=2.5)
        self.assertEqual(peers, [msg(4, 2.0)])
        args, kwargs = mock_request.call_args
        self.assertEqual(args, ('GET', 'http://v2v.test:8765/v2v/peers'))
        self.assertEqual(kwargs['params'], {'since': '1.0', 'now': '2.5'})
        self.assertEqual(kwargs['timeout'], 0.1)


@pytest.mark.integration
def test_tcp_server_round_trip():
    with V2VServer('127.0.0.1', 0) as server:
        assert server.is_running()
        assert server.get_status()['port'] == server.port
        client = V2VClient(server.url, timeout=2.0)
        try:
            client.publish_state(msg(1, 0.3, Intent.INSIDE))
            client.publish_state(msg(2, 0.3))
            assert [m.sender_id for m in client.fetch_peers(now=0.4)] == [1, 2]
        finally:
            client.close()
    assert not server.is_running()


def test_unreachable_server_is_refused():
    client = V2VClient('http://127.0.0.1:9', timeout=0.5)
    with pytest.raises((V2VConnectionRefused, V2VTimeout)):
        client.fetch_peers()


class TestArbitration:
    def test_lone_vehicle_may_enter(self):
        assert safe_to_proceed(1, Intent.ENTER, [], ZONE)

    def test_occupied_zone_blocks(self):
        assert not safe_to_proceed(2, Intent.ENTER, [msg(3, intent=Intent.INSIDE)], ZONE)

    def test_lower_id_has_priority(self):
        peers = [msg(1), msg(2), msg(3)]
        assert safe_to_proceed(1, Intent.ENTER, peers, ZONE)
        assert not safe_to_proceed(2, Intent.ENTER, peers, ZONE)
        assert not safe_to_proceed(3, Intent.ENTER, peers, ZONE)

    def test_capacity(self):
        zone = ConflictZone(Pose2D(), 2.2, 1.0, capacity=2)
        peers = [msg(1), msg(2), msg(3)]
        assert safe_to_proceed(2, Intent.ENTER, peers, zone)
        assert not safe_to_proceed(3, Intent.ENTER, peers, zone)

    def test_exiting_and_yielding_peers_do_not_block(self):
        peers = [msg(1, intent=Intent.EXIT), msg(2, intent=Intent.YIELD)]
        assert safe_to_proceed(3, Intent.ENTER, peers, ZONE)

    def test_zone_validation(self):
        with pytest.raises(ValueError):
            ConflictZone(Pose2D(), 1.0, 2.0)
        with pytest.raises(ValueError):
            ConflictZone(Pose2D(), 2.0, 1.0, capacity=0)

    def test_object_list_is_sender_relative(self):
        objects = object_list(1, Pose2D(1.0, 0.0, math.pi / 2),
                              [(1, Pose2D()), (2, Pose2D(1.0, 2.0, 0.0))])
        assert len(objects) == 1
        assert objects[0].peer_id == 2
        assert (objects[0].rel_x, objects[0].rel_y) == pytest.approx((2.0, 0.0))


class TestRoundaboutController:
    def controller(self, roster=(1, 2)):
        path = WaypointPath(np.array([[6.0, 0.0, 1.5], [-6.0, 0.0, 1.5]]))
        tracker = PurePursuitTracker(path, PursuitConfig(lookahead=0.6))
        return RoundaboutController(2, tracker, ZONE, roster)

    def test_yields_at_the_line_without_news(self):
        ctl = self.controller()
        at_line = VehicleState(Pose2D(2.4, 0.0, math.pi), v=1.0)
        assert ctl.command(at_line, None).speed == 0.0
        assert not ctl.safe
        assert ctl.command(at_line, []).speed == 0.0  # peer 1 is on the roster but unheard

    def test_far_away_speed_is_limited_not_stopped(self):
        ctl = self.controller()
        far = VehicleState(Pose2D(4.4, 0.0, math.pi), v=1.0)
        cmd = ctl.command(far, [msg(1, intent=Intent.INSIDE)])
        assert cmd.speed == pytest.approx(min(1.5, math.sqrt(2 * 2.0 * 2.0)))

    def test_proceeds_when_safe_and_commits(self):
        ctl = self.controller()
        at_line = VehicleState(Pose2D(2.3, 0.0, math.pi), v=1.0)
        assert ctl.command(at_line, [msg(1, intent=Intent.EXIT)]).speed == pytest.approx(1.5)
        assert ctl.committed
        # Once over the line it keeps going even if the channel drops
        assert ctl.command(at_line, None).speed == pytest.approx(1.5)

    def test_intent_lifecycle(self):
        ctl = self.controller(roster=())
        assert ctl.update_intent(Pose2D(4.0, 0.0, 0.0)) == Intent.ENTER
        assert ctl.update_intent(Pose2D(1.5, 0.0, 0.0)) == Intent.INSIDE
        assert ctl.update_intent(Pose2D(-4.0, 0.0, 0.0)) == Intent.EXIT

    def test_message_carries_state(self):
        ctl = self.controller(roster=())
        ctl.command(VehicleState(Pose2D(5.0, 0.0, math.pi), v=1.0), [])
        message = ctl.message(1.25, [(1, Pose2D(5.0, 1.0, 0.0))], Pose2D(5.0, 0.0, math.pi))
        assert message.sender_id == 2 and message.ts == 1.25
        assert message.intent == Intent.ENTER and message.safe
        assert message.objects[0].peer_id == 1
