"""Newline-delimited JSON protocol for external imagination and reasoning backends.

A backend is a child process speaking over stdin/stdout (``exec:CMD``) or a TCP
server (``tcp:HOST:PORT``). Each request is one JSON line and gets one JSON line
back. Any failure (timeout, malformed reply, error reply) falls back to the
built-in procedural implementation and is logged.
"""

from __future__ import annotations

import argparse
import base64
import json
import logging
import os
import selectors
import shlex
import socket
import socketserver
import subprocess
import sys
import time
from typing import Sequence

import numpy as np

from .environment import Panorama, WorldParams
from .errors import ConfigurationError, ContractError
from .imagination import (
    DYNAMIC,
    IMAGINATION_SEED,
    STATIC,
    InstructionState,
    SceneHypothesis,
    imagine_dynamic,
    imagine_static,
    inpaint_panorama,
    prototype_grid,
)
from .reasoner import STOP, CandidateEvidence, ReasonerConfig, decide

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
DEFAULT_TIMEOUT = 30.0


class BackendError(Exception):
    pass


def encode_grid(grid: np.ndarray) -> dict:
    g = np.asarray(grid)
    if g.ndim != 3:
        raise ContractError(f"grid must be 3-D, got shape {g.shape}")
    h, w, c = g.shape
    data = np.ascontiguousarray(g, dtype="<f4").tobytes()
    return {"h": h, "w": w, "c": c, "data": base64.b64encode(data).decode("ascii")}


def decode_grid(d: dict) -> np.ndarray:
    try:
        h, w, c = int(d["h"]), int(d["w"]), int(d["c"])
        raw = base64.b64decode(d["data"], validate=True)
    except (KeyError, TypeError, ValueError) as exc:
        raise BackendError(f"malformed grid: {exc}") from None
    if len(raw) != 4 * h * w * c:
        raise BackendError(f"grid payload has {len(raw)} bytes, expected {4 * h * w * c}")
    return np.frombuffer(raw, "<f4").reshape(h, w, c).astype(float)


def parse_backend(spec: str | None) -> tuple[str, str] | None:
    """``None``/``builtin`` -> None; ``exec:CMD`` and ``tcp:HOST:PORT`` -> (kind, target)."""
    if spec is None or spec == "builtin":
        return None
    kind, _, target = spec.partition(":")
    if kind not in ("exec", "tcp") or not target:
        raise ConfigurationError(f"backend must be builtin, exec:\"CMD\" or tcp:HOST:PORT, got {spec!r}")
    if kind == "exec":
        target = target.strip()
        if len(target) >= 2 and target[0] == target[-1] and target[0] in "\"'":
            target = target[1:-1]
    else:
        host, _, port = target.rpartition(":")
        if not host or not port.isdigit():
            raise ConfigurationError(f"tcp backend needs HOST:PORT, got {target!r}")
    return kind, target


class _Connection:
    """One request/response stream; requests are serialized."""

    def __init__(self, kind: str, target: str, timeout: float):
        self.timeout = timeout
        self.proc = None
        self.sock = None
        self._buf = b""
        if kind == "exec":
            self.proc = subprocess.Popen(
                shlex.split(target), stdin=subprocess.PIPE, stdout=subprocess.PIPE, bufsize=0
            )
        else:
            host, _, port = target.rpartition(":")
            self.sock = socket.create_connection((host, int(port)), timeout=timeout)

    def request(self, msg: dict) -> dict:
        line = (json.dumps(msg, separators=(",", ":")) + "\n").encode()
        if self.proc is not None:
            self.proc.stdin.write(line)
            self.proc.stdin.flush()
        else:
            self.sock.sendall(line)
        reply = self._readline()
        try:
            return json.loads(reply)
        except json.JSONDecodeError as exc:
            raise BackendError(f"backend sent invalid JSON: {exc}") from None

    def _readline(self) -> bytes:
        deadline = time.monotonic() + self.timeout
        while b"\n" not in self._buf:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TimeoutError(f"no reply within {self.timeout:.1f} s")
            chunk = self._recv(remaining)
            if not chunk:
                raise BackendError("backend closed the stream")
            self._buf += chunk
        line, _, self._buf = self._buf.partition(b"\n")
        return line

    def _recv(self, timeout: float) -> bytes:
        if self.sock is not None:
            self.sock.settimeout(timeout)
            try:
                return self.sock.recv(65536)
            except socket.timeout:
                raise TimeoutError(f"no reply within {self.timeout:.1f} s") from None
        with selectors.DefaultSelector() as sel:
            sel.register(self.proc.stdout, selectors.EVENT_READ)
            if not sel.select(timeout):
                raise TimeoutError(f"no reply within {self.timeout:.1f} s")
        return os.read(self.proc.stdout.fileno(), 65536)

    def close(self) -> None:
        if self.proc is not None:
            try:
                self.proc.stdin.close()
            except OSError:
                pass
            try:
                self.proc.wait(timeout=1.0)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()
            self.proc = None
        if self.sock is not None:
            self.sock.close()
            self.sock = None


class BackendClient:
    """Imaginer (and optional reasoner) backed by an external process.

    Picklable: the connection is opened lazily in whichever process uses it.
    After a timeout or broken stream the client stops using the backend for the
    rest of its life, since the stream can no longer be trusted to be in sync.
    """

    def __init__(self, spec: str, timeout: float = DEFAULT_TIMEOUT, mask_salient: bool = True):
        parsed = parse_backend(spec)
        if parsed is None:
            raise ConfigurationError("BackendClient needs an exec: or tcp: backend")
        self.spec = spec
        self.kind, self.target = parsed
        self.timeout = timeout
        self.mask_salient = mask_salient
        self._conn: _Connection | None = None
        self.disabled = False
        self.fallbacks = 0

    def __getstate__(self):
        state = dict(self.__dict__)
        state["_conn"] = None
        return state

    def _call(self, msg: dict) -> dict | None:
        if self.disabled:
            return None
        try:
            if self._conn is None:
                self._conn = _Connection(self.kind, self.target, self.timeout)
            reply = self._conn.request(msg)
        except (OSError, TimeoutError, BackendError) as exc:
            log.warning("backend %s failed (%s); using the built-in implementation", self.spec, exc)
            self.fallbacks += 1
            self.disabled = True
            self.close()
            return None
        if not isinstance(reply, dict) or reply.get("v") != PROTOCOL_VERSION:
            log.warning("backend %s replied with an unsupported message; using the built-in implementation",
                        self.spec)
            self.fallbacks += 1
            return None
        if "error" in reply:
            log.warning("backend %s reported an error: %s; using the built-in implementation",
                        self.spec, reply["error"])
            self.fallbacks += 1
            return None
        return reply

    # -- imagination

    def __call__(self, mode, instr, pano, history, world, viewpoint) -> SceneHypothesis:
        builtin = _builtin_hypothesis(mode, instr, pano, history, world, viewpoint, self.mask_salient)
        reply = self._call(imagine_request(mode, builtin.target_entity, instr, pano))
        if reply is None:
            return builtin
        try:
            imagined = decode_grid(reply["imagined"])
            inpainted = decode_grid(reply["inpainted"])
        except (KeyError, BackendError) as exc:
            log.warning("backend %s reply unusable (%s); using the built-in implementation", self.spec, exc)
            self.fallbacks += 1
            return builtin
        shape = world.params.grid_shape
        if imagined.shape != shape or inpainted.shape != shape:
            log.warning("backend %s returned grids of shape %s/%s, expected %s", self.spec,
                        imagined.shape, inpainted.shape, shape)
            self.fallbacks += 1
            return builtin
        return SceneHypothesis(np.clip(imagined, 0.0, 1.0), np.clip(inpainted, 0.0, 1.0),
                               builtin.target_entity, mode)

    # -- reasoning

    def reason(self, step: int, instr: InstructionState, stages: dict,
               evidence: Sequence[CandidateEvidence]) -> dict | None:
        """Ask the backend for stage texts and an action; None means keep the built-in ones."""
        reply = self._call(reason_request(step, instr, stages, evidence))
        if reply is None:
            return None
        allowed = {e.candidate_id for e in evidence} | {STOP}
        texts = [reply.get(k) for k in ("stage1", "stage2", "stage3")]
        if reply.get("action") not in allowed or not all(isinstance(t, str) and t.strip() for t in texts):
            log.warning("backend %s returned an invalid reasoning reply; keeping the built-in one", self.spec)
            self.fallbacks += 1
            return None
        return {"stage1": texts[0], "stage2": texts[1], "stage3": texts[2], "action": reply["action"]}

    def close(self) -> None:
        if self._conn is not None:
            self._conn.close()
            self._conn = None


def _builtin_hypothesis(mode, instr, pano, history, world, viewpoint, mask_salient) -> SceneHypothesis:
    if mode == STATIC:
        return imagine_static(instr, world.params, pano, mask_salient)
    return imagine_dynamic(pano, history, instr, world.params, viewpoint, mask_salient)


def imagine_request(mode: str, target: int, instr: InstructionState, pano: Panorama) -> dict:
    return {
        "v": PROTOCOL_VERSION,
        "kind": "imagine",
        "mode": mode,
        "target_entity": int(target),
        "entities": [int(e) for e in instr.entities],
        "obs": encode_grid(pano.grid),
        "tile_w": int(pano.tile_width),
    }


def reason_request(step: int, instr: InstructionState, stages: dict,
                   evidence: Sequence[CandidateEvidence]) -> dict:
    return {
        "v": PROTOCOL_VERSION,
        "kind": "reason",
        "step": step,
        "instruction": {"entities": [int(e) for e in instr.entities], "cursor": instr.cursor},
        "stages": stages,
        "candidates": [e.to_json() for e in evidence],
    }


# --------------------------------------------------------------------------- reference server

def handle_request(msg: dict, vocab_size: int = 32) -> dict:
    """Reference backend: answers with the built-in procedural implementation."""
    try:
        if msg.get("v") != PROTOCOL_VERSION:
            return {"v": PROTOCOL_VERSION, "error": f"unsupported protocol version {msg.get('v')!r}"}
        kind = msg.get("kind", "imagine")
        if kind == "imagine":
            return _serve_imagine(msg, vocab_size)
        if kind == "reason":
            return _serve_reason(msg)
        return {"v": PROTOCOL_VERSION, "error": f"unknown message kind {kind!r}"}
    except Exception as exc:  # a backend must answer every line
        return {"v": PROTOCOL_VERSION, "error": f"{type(exc).__name__}: {exc}"}


def _serve_imagine(msg: dict, vocab_size: int) -> dict:
    obs = decode_grid(msg["obs"])
    h, w_total, c = obs.shape
    target = int(msg["target_entity"])
    mode = msg["mode"]
    if mode not in (STATIC, DYNAMIC):
        raise ValueError(f"mode must be static or dynamic, got {mode!r}")
    tile_w = int(msg.get("tile_w", h))
    params = WorldParams(vocab_size=vocab_size, height=h, width=tile_w, channels=c)
    if w_total % params.width:
        raise ValueError(f"observation width {w_total} is not a whole number of {params.width}-wide tiles")
    imagined = prototype_grid(target, params, IMAGINATION_SEED)
    tiles = tuple(obs[:, i : i + params.width] for i in range(0, w_total, params.width))
    pano = Panorama(tuple(range(len(tiles))), tuple(0.0 for _ in tiles), tiles, tuple(() for _ in tiles))
    inpainted, _ = inpaint_panorama(pano, imagined)
    return {"v": PROTOCOL_VERSION, "imagined": encode_grid(imagined), "inpainted": encode_grid(inpainted)}


def _serve_reason(msg: dict) -> dict:
    evidence = [
        CandidateEvidence(
            candidate_id=int(e["candidate_id"]),
            tile_index=int(e["tile_index"]),
            attention_mass=float(e["attention_mass"]),
            similarity=float(e["similarity"]),
            revisit=bool(e["revisit"]),
            entities_seen=tuple(int(x) for x in e["entities_seen"]),
        )
        for e in msg["candidates"]
    ]
    instr = InstructionState(tuple(msg["instruction"]["entities"]), int(msg["instruction"]["cursor"]))
    decision = decide(evidence, instr, ReasonerConfig())
    stages = msg.get("stages", {})
    return {
        "v": PROTOCOL_VERSION,
        "stage1": stages.get("stage1") or "goal grounded by the reference backend",
        "stage2": stages.get("stage2") or "perception verified by the reference backend",
        "stage3": decision.text,
        "action": decision.action,
    }


def serve_stream(inp, out, vocab_size: int = 32) -> None:
    for raw in inp:
        raw = raw.strip()
        if not raw:
            continue
        try:
            msg = json.loads(raw)
        except json.JSONDecodeError as exc:
            reply = {"v": PROTOCOL_VERSION, "error": f"invalid JSON: {exc}"}
        else:
            reply = handle_request(msg, vocab_size)
        out.write(json.dumps(reply, separators=(",", ":")) + "\n")
        out.flush()


def make_tcp_server(host: str, port: int, vocab_size: int = 32) -> socketserver.ThreadingTCPServer:
    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            for raw in self.rfile:
                if not raw.strip():
                    continue
                try:
                    reply = handle_request(json.loads(raw), vocab_size)
                except json.JSONDecodeError as exc:
                    reply = {"v": PROTOCOL_VERSION, "error": f"invalid JSON: {exc}"}
                self.wfile.write((json.dumps(reply, separators=(",", ":")) + "\n").encode())

    socketserver.ThreadingTCPServer.allow_reuse_address = True
    server = socketserver.ThreadingTCPServer((host, port), Handler)
    server.daemon_threads = True
    return server


def main(argv: Sequence[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="python -m imagine_nav.backend",
                                 description="Reference imagination/reasoning backend.")
    ap.add_argument("--vocab-size", type=int, default=32)
    ap.add_argument("--tcp", metavar="HOST:PORT", help="listen on TCP instead of standard I/O")
    args = ap.parse_args(argv)
    if args.tcp:
        host, _, port = args.tcp.rpartition(":")
        with make_tcp_server(host or "127.0.0.1", int(port), args.vocab_size) as server:
            server.serve_forever()
    else:
        serve_stream(sys.stdin, sys.stdout, args.vocab_size)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
