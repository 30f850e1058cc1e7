"""Client for simulators running as persistent child processes.

Wire protocol (text, one request per line, '.' decimal separator):

    parent -> child   SEQCAL/1
    child  -> parent  OK
    parent -> child   q p x_1 ... x_q theta_1 ... theta_p
    child  -> parent  <one decimal scalar>

Values are sent in the simulator's natural units. Floats are written with
``repr`` so they round-trip exactly.
"""
from __future__ import annotations

import atexit
import math
import queue
import shlex
import subprocess
import sys
import threading
from dataclasses import dataclass

import numpy as np

from .errors import SimCrashed, SimProtocol, SimTimeout

PROTOCOL = "SEQCAL/1"


@dataclass(frozen=True)
class ExternalSimSpec:
    command: tuple
    q: int
    p: int
    cwd: str | None = None
    timeout: float = 30.0
    version: str = PROTOCOL

    def __post_init__(self):
        cmd = self.command
        if isinstance(cmd, str):
            cmd = tuple(shlex.split(cmd))
        if not cmd:
            raise ValueError("external simulator command is empty")
        if not self.timeout > 0:
            raise ValueError("timeout must be positive")
        object.__setattr__(self, "command", tuple(cmd))


def format_request(q: int, p: int, z) -> str:
    z = np.asarray(z, dtype=float).ravel()
    if z.size != q + p:
        raise ValueError(f"expected {q + p} inputs, got {z.size}")
    return " ".join([str(q), str(p)] + [repr(float(v)) for v in z])


def parse_request(line: str):
    """Inverse of ``format_request``; returns ``(x, theta)``."""
    parts = line.split()
    q, p = int(parts[0]), int(parts[1])
    vals = [float(v) for v in parts[2:]]
    if len(vals) != q + p:
        raise ValueError("request length does not match q + p")
    return np.array(vals[:q]), np.array(vals[q:])


class ExternalSimulator:
    """A persistent child process answering one request per line.

    A reader thread feeds stdout lines into a queue so that reads can time
    out. After any failure the child is killed; the next call starts a fresh
    one.
    """

    def __init__(self, spec: ExternalSimSpec):
        self.spec = spec
        self._proc = None
        self._lines = None

    def _start(self):
        self._proc = subprocess.Popen(
            list(self.spec.command), cwd=self.spec.cwd, stdin=subprocess.PIPE,
            stdout=subprocess.PIPE, stderr=subprocess.DEVNULL, text=True, bufsize=1,
        )
        self._lines = queue.Queue()
        threading.Thread(target=self._pump, args=(self._proc.stdout, self._lines), daemon=True).start()
        reply = self._exchange(self.spec.version)
        if reply != "OK":
            self.close()
            raise SimProtocol(f"handshake expected 'OK', got {reply!r}")

    @staticmethod
    def _pump(stream, lines):
        # the pump owns stdout; closing it from another thread would block on its lock
        with stream:
            for line in stream:
                lines.put(line)
        lines.put(None)

    def _exchange(self, message: str) -> str:
        try:
            self._proc.stdin.write(message + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as err:
            code = self._proc.poll()
            self.close()
            raise SimCrashed(f"child closed its input (exit code {code})") from err
        try:
            line = self._lines.get(timeout=self.spec.timeout)
        except queue.Empty:
            self.close()
            raise SimTimeout(f"no reply within {self.spec.timeout:g} s") from None
        if line is None:
            try:
                code = self._proc.wait(timeout=self.spec.timeout)
            except subprocess.TimeoutExpired:
                code = None
            self.close()
            raise SimCrashed(f"child exited with code {code}")
        return line.strip()

    def __call__(self, z) -> float:
        if self._proc is None or self._proc.poll() is not None:
            if self._proc is not None:
                code = self._proc.returncode
                self.close()
                raise SimCrashed(f"child exited with code {code}")
            self._start()
        reply = self._exchange(format_request(self.spec.q, self.spec.p, z))
        try:
            value = float(reply)
        except ValueError:
            self.close()
            raise SimProtocol(f"non-numeric reply {reply!r}") from None
        if not math.isfinite(value):
            raise SimProtocol(f"non-finite reply {reply!r}")
        return value

    def close(self):
        if self._proc is None:
            return
        proc, self._proc = self._proc, None
        if proc.poll() is None:
            proc.kill()
        try:
            proc.stdin.close()
        except (OSError, ValueError):
            pass
        try:
            proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


_POOL: dict = {}


def eval_external(spec: ExternalSimSpec, z) -> float:
    """Evaluate ``z`` with a child process kept alive per spec."""
    sim = _POOL.get(spec)
    if sim is None:
        sim = _POOL[spec] = ExternalSimulator(spec)
    return sim(z)


@atexit.register
def _close_pool():
    for sim in _POOL.values():
        sim.close()
    _POOL.clear()


def serve(evaluate, stdin=None, stdout=None):
    """Child-side loop: answer the handshake, then one value per request line."""
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    header = stdin.readline().strip()
    if header != PROTOCOL:
        stdout.write(f"ERR unsupported protocol {header!r}\n")
        stdout.flush()
        return 2
    stdout.write("OK\n")
    stdout.flush()
    for line in stdin:
        if not line.strip():
            continue
        x, theta = parse_request(line)
        stdout.write(repr(float(evaluate(x, theta))) + "\n")
        stdout.flush()
    return 0
