"""Management HTTP API and a small client for it.

JSON over HTTP, EUIs and keys hex-encoded, payloads base64. Key material is
redacted in every response. When a token is configured every request must
carry ``Authorization: Bearer <token>``.
"""

from __future__ import annotations

import base64
import binascii
import hmac
import json
import logging
import re
import threading
import urllib.error
import urllib.parse
import urllib.request
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .store import (AppItem, DeviceRecord, DuplicateDevAddr, DuplicateEui, GatewayRecord, NotFound, StoreError,
                    parse_hex)

log = logging.getLogger(__name__)


class ApiError(Exception):
    def __init__(self, status, message):
        super().__init__(message)
        self.status = int(status)
        self.message = message


def _eui(text):
    try:
        return parse_hex(text, 8, "EUI")
    except ValueError as exc:
        raise ApiError(HTTPStatus.BAD_REQUEST, str(exc)) from None


class AdminApi:
    """Request handling independent of the HTTP plumbing."""

    def __init__(self, server):
        self.server = server
        self.store = server.store
        self.routes = [
            ("POST", r"/api/devices", self.add_device),
            ("GET", r"/api/devices", self.list_devices),
            ("GET", r"/api/devices/(\w+)", self.get_device),
            ("DELETE", r"/api/devices/(\w+)", self.delete_device),
            ("GET", r"/api/devices/(\w+)/session", self.get_session),
            ("GET", r"/api/devices/(\w+)/frames", self.get_frames),
            ("GET", r"/api/devices/(\w+)/uplinks", self.get_uplinks),
            ("POST", r"/api/devices/(\w+)/downlink", self.post_downlink),
            ("POST", r"/api/devices/(\w+)/mac", self.post_mac),
            ("POST", r"/api/gateways", self.add_gateway),
            ("GET", r"/api/gateways", self.list_gateways),
            ("GET", r"/api/gateways/(\w+)", self.get_gateway),
            ("DELETE", r"/api/gateways/(\w+)", self.delete_gateway),
            ("GET", r"/api/stats", self.stats),
            ("POST", r"/api/fixtures", self.load_fixtures),
        ]

    def dispatch(self, method, path, query, body):
        """Returns (status, document)."""
        matched_path = False
        for verb, pattern, fn in self.routes:
            m = re.fullmatch(pattern, path)
            if m is None:
                continue
            matched_path = True
            if verb == method:
                return fn(*m.groups(), query=query, body=body)
        if matched_path:
            raise ApiError(HTTPStatus.METHOD_NOT_ALLOWED, "%s not allowed on %s" % (method, path))
        raise ApiError(HTTPStatus.NOT_FOUND, "no such endpoint %s" % path)

    @staticmethod
    def _json(body):
        try:
            doc = json.loads(body or b"{}")
        except ValueError as exc:
            raise ApiError(HTTPStatus.BAD_REQUEST, "body is not JSON: %s" % exc) from None
        if not isinstance(doc, dict):
            raise ApiError(HTTPStatus.BAD_REQUEST, "body must be a JSON object")
        return doc

    # devices

    def add_device(self, query, body):
        try:
            rec = DeviceRecord.from_dict(self._json(body))
            self.store.register_device(rec)
        except (DuplicateEui, DuplicateDevAddr) as exc:
            raise ApiError(HTTPStatus.CONFLICT, str(exc)) from None
        except (StoreError, KeyError, ValueError) as exc:
            raise ApiError(HTTPStatus.BAD_REQUEST, "bad device record: %s" % exc) from None
        return HTTPStatus.CREATED, rec.to_dict()

    def list_devices(self, query, body):
        return HTTPStatus.OK, [d.to_dict() for d in self.store.registry.devices()]

    def _device(self, eui):
        rec = self.store.registry.get_device(_eui(eui))
        if rec is None:
            raise ApiError(HTTPStatus.NOT_FOUND, "unknown device %s" % eui)
        return rec

    def get_device(self, eui, query, body):
        return HTTPStatus.OK, self._device(eui).to_dict()

    def delete_device(self, eui, query, body):
        if not self.store.delete_device(_eui(eui)):
            raise ApiError(HTTPStatus.NOT_FOUND, "unknown device %s" % eui)
        return HTTPStatus.OK, dict(deleted=eui.lower())

    def _session(self, eui):
        self._device(eui)
        try:
            return self.store.session_by_eui(_eui(eui))
        except NotFound:
            raise ApiError(HTTPStatus.NOT_FOUND, "device %s has no session" % eui) from None

    def get_session(self, eui, query, body):
        return HTTPStatus.OK, self._session(eui).snapshot()

    def get_frames(self, eui, query, body):
        self._device(eui)
        try:
            limit = int(query.get("limit", ["50"])[0])
        except ValueError:
            raise ApiError(HTTPStatus.BAD_REQUEST, "limit must be an integer") from None
        return HTTPStatus.OK, self.store.frames(_eui(eui), max(0, limit))

    def get_uplinks(self, eui, query, body):
        self._device(eui)
        return HTTPStatus.OK, self.server.appserver.uplinks(eui)

    def post_downlink(self, eui, query, body):
        doc = self._json(body)
        try:
            fport = int(doc["fport"])
            payload = base64.b64decode(doc.get("payload_b64", ""), validate=True)
        except (KeyError, ValueError, TypeError, binascii.Error) as exc:
            raise ApiError(HTTPStatus.BAD_REQUEST, "need fport and base64 payload_b64: %s" % exc) from None
        if not 1 <= fport <= 223:
            raise ApiError(HTTPStatus.BAD_REQUEST, "fport must be 1..223")
        if len(payload) > 242:
            raise ApiError(HTTPStatus.BAD_REQUEST, "payload longer than 242 bytes")
        session = self._session(eui)
        item = AppItem(fport, payload, bool(doc.get("confirmed", False)))
        self.store.enqueue_downlink(session.dev_addr, item)
        return HTTPStatus.ACCEPTED, dict(dev_eui=eui.lower(), queued=len(self.store.app_queue(session.dev_addr)))

    def post_mac(self, eui, query, body):
        doc = self._json(body)
        self._session(eui)
        try:
            rec = dict(dev_eui=eui.lower(), cid=int(doc["cid"]), payload=bytes.fromhex(doc.get("payload", "")).hex())
        except (KeyError, ValueError, TypeError) as exc:
            raise ApiError(HTTPStatus.BAD_REQUEST, "need cid and hex payload: %s" % exc) from None
        self.server.bus.publish_record("controller.cmds", _eui(eui), "mac-command", rec)
        return HTTPStatus.ACCEPTED, rec

    # gateways

    def add_gateway(self, query, body):
        try:
            rec = GatewayRecord.from_dict(self._json(body))
            self.store.register_gateway(rec)
        except DuplicateEui as exc:
            raise ApiError(HTTPStatus.CONFLICT, str(exc)) from None
        except (StoreError, KeyError, ValueError) as exc:
            raise ApiError(HTTPStatus.BAD_REQUEST, "bad gateway record: %s" % exc) from None
        return HTTPStatus.CREATED, rec.to_dict()

    def list_gateways(self, query, body):
        return HTTPStatus.OK, [g.to_dict() for g in self.store.registry.gateways()]

    def get_gateway(self, eui, query, body):
        rec = self.store.registry.get_gateway(_eui(eui))
        if rec is None:
            raise ApiError(HTTPStatus.NOT_FOUND, "unknown gateway %s" % eui)
        return HTTPStatus.OK, rec.to_dict()

    def delete_gateway(self, eui, query, body):
        if not self.store.delete_gateway(_eui(eui)):
            raise ApiError(HTTPStatus.NOT_FOUND, "unknown gateway %s" % eui)
        return HTTPStatus.OK, dict(deleted=eui.lower())

    # misc

    def stats(self, query, body):
        return HTTPStatus.OK, self.server.stats()

    def load_fixtures(self, query, body):
        loaded, errors = self.store.load_records((body or b"").decode().splitlines())
        return HTTPStatus.OK, dict(loaded=loaded, errors=errors)


class _Handler(BaseHTTPRequestHandler):
    api: AdminApi = None
    token = None
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.debug("admin %s " + fmt, self.address_string(), *args)

    def _reply(self, status, doc):
        data = json.dumps(doc).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _handle(self, method):
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else b""
        if self.token:
            got = self.headers.get("Authorization", "")
            if not hmac.compare_digest(got.encode(), ("Bearer " + self.token).encode()):
                return self._reply(HTTPStatus.UNAUTHORIZED, dict(error="missing or wrong bearer token"))
        url = urllib.parse.urlsplit(self.path)
        try:
            status, doc = self.api.dispatch(method, url.path.rstrip("/") or "/", urllib.parse.parse_qs(url.query),
                                            body)
        except ApiError as exc:
            status, doc = exc.status, dict(error=exc.message)
        except Exception as exc:
            log.exception("admin request failed")
            status, doc = HTTPStatus.INTERNAL_SERVER_ERROR, dict(error=str(exc))
        self._reply(status, doc)

    def do_GET(self):
        self._handle("GET")

    def do_POST(self):
        self._handle("POST")

    def do_DELETE(self):
        self._handle("DELETE")


class AdminServer:
    def __init__(self, server, host="127.0.0.1", port=8080, token=None):
        handler = type("Handler", (_Handler,), dict(api=AdminApi(server), token=token))
        self.httpd = ThreadingHTTPServer((host, port), handler)
        self.httpd.daemon_threads = True
        self._thread = None

    @property
    def url(self):
        host, port = self.httpd.server_address[:2]
        return "http://%s:%d" % (host, port)

    def start(self):
        self._thread = threading.Thread(target=self.httpd.serve_forever, name="admin", daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self.httpd.shutdown()
        self.httpd.server_close()


class AdminClient:
    """Thin urllib client used by the CLI and the load harness."""

    def __init__(self, base_url="http://127.0.0.1:8080", token=None, timeout=10.0):
        self.base_url = base_url.rstrip("/")
        self.token = token
        self.timeout = timeout

    def request(self, method, path, doc=None, raw=None):
        data = raw if raw is not None else (json.dumps(doc).encode() if doc is not None else None)
        req = urllib.request.Request(self.base_url + path, data=data, method=method)
        req.add_header("Content-Type", "application/json")
        if self.token:
            req.add_header("Authorization", "Bearer " + self.token)
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return resp.status, json.loads(resp.read() or b"null")
        except urllib.error.HTTPError as exc:
            try:
                body = json.loads(exc.read() or b"null")
            except ValueError:
                body = None
            return exc.code, body

    def add_device(self, **fields):
        return self.request("POST", "/api/devices", fields)

    def devices(self):
        return self.request("GET", "/api/devices")

    def delete_device(self, eui):
        return self.request("DELETE", "/api/devices/" + eui)

    def add_gateway(self, **fields):
        return self.request("POST", "/api/gateways", fields)

    def gateways(self):
        return self.request("GET", "/api/gateways")

    def delete_gateway(self, eui):
        return self.request("DELETE", "/api/gateways/" + eui)

    def session(self, eui):
        return self.request("GET", "/api/devices/%s/session" % eui)

    def frames(self, eui, limit=50):
        return self.request("GET", "/api/devices/%s/frames?limit=%d" % (eui, limit))

    def downlink(self, eui, fport, payload: bytes, confirmed=False):
        return self.request("POST", "/api/devices/%s/downlink" % eui,
                            dict(fport=fport, payload_b64=base64.b64encode(payload).decode(), confirmed=confirmed))

    def stats(self):
        return self.request("GET", "/api/stats")

    def load_fixtures(self, text: str):
        return self.request("POST", "/api/fixtures", raw=text.encode())
