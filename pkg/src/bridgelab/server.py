"""Live tournament service: pending-matchup dispatch, choice recording,
append-only persistence, and PNG serving for the rating UI.

The append-only JSONL log is the single source of truth: one record per
decided matchup carrying both candidate references, the presentation
(left/right as shown), the winner, the rater, and a timestamp. Restart
reconstructs every pool by replaying the log; an in-flight (dispatched but
unanswered) matchup is the most that can be lost.

Dispatch is strictly serialized per group: a group has at most one matchup
outstanding, and groups are offered round-robin so one slow rater cannot
starve the rest. Replayed choices for an already-decided matchup return
HTTP 409.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, asdict
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import urlparse, parse_qs

import numpy as np

from .imgio import read_image, png_bytes
from .training import LabeledPair


@dataclass(frozen=True)
class ServedCandidate:
    """Candidate reference as persisted in the index and the log."""

    candidate_id: str
    subject: str
    slice_id: int
    img: str  # path relative to the data root
    z0: str
    checkpoint_id: str
    scale: float

    def ref(self) -> dict:
        return {
            "id": self.candidate_id,
            "img": self.img,
            "z0": self.z0,
            "checkpoint": self.checkpoint_id,
            "scale": self.scale,
        }


def write_candidate_index(path: str | Path, candidates: list[ServedCandidate]) -> None:
    with open(path, "w") as fh:
        for c in candidates:
            fh.write(json.dumps(asdict(c)) + "\n")


def load_candidate_index(path: str | Path) -> list[ServedCandidate]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(ServedCandidate(**json.loads(line)))
            except (json.JSONDecodeError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: corrupt index line: {exc}") from exc
    return out


def matchup_record(
    matchup_id: str,
    group: tuple[str, int],
    left: ServedCandidate,
    right: ServedCandidate,
    winner_side: str,
    rater: str,
    pool_size: int,
) -> dict:
    return {
        "matchup_id": matchup_id,
        "group": [group[0], group[1]],
        "pool": pool_size,
        "left": left.ref(),
        "right": right.ref(),
        "winner": winner_side,
        "winner_id": (left if winner_side == "left" else right).candidate_id,
        "rater": rater,
        "ts": time.time(),
    }


class _Group:
    def __init__(self, key: tuple[str, int], candidates: list[ServedCandidate]):
        self.key = key
        self.total = len(candidates)
        self.by_id = {c.candidate_id: c for c in candidates}
        self.alive = [c.candidate_id for c in candidates]
        self.in_flight: dict | None = None

    @property
    def done(self) -> int:
        return self.total - len(self.alive)

    @property
    def complete(self) -> bool:
        return len(self.alive) == 1

    def progress(self) -> float:
        if self.total <= 1:
            return 1.0
        return self.done / (self.total - 1)


class TournamentCoordinator:
    """Thread-safe tournament state over candidate pools plus the log."""

    def __init__(
        self,
        candidates: list[ServedCandidate],
        log_path: str | Path,
        data_root: str | Path,
        seed: int = 0,
    ):
        self._lock = threading.Lock()
        self._rng = np.random.default_rng(seed)
        self.data_root = Path(data_root)
        self.log_path = Path(log_path)
        self.groups: dict[tuple[str, int], _Group] = {}
        for c in candidates:
            key = (c.subject, c.slice_id)
            self.groups.setdefault(key, _Group(key, [])).by_id[c.candidate_id] = c
        # rebuild alive lists in index order
        for key, g in self.groups.items():
            g.alive = list(g.by_id.keys())
            g.total = len(g.alive)
        self._rr_keys = sorted(self.groups.keys())
        self._rr_pos = 0
        self._decided: set[str] = set()
        self._seq = 0
        if self.log_path.exists():
            self._replay()

    def _replay(self) -> None:
        with open(self.log_path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                    key = (rec["group"][0], int(rec["group"][1]))
                    loser_side = "right" if rec["winner"] == "left" else "left"
                    loser_id = rec[loser_side]["id"]
                except (json.JSONDecodeError, KeyError, IndexError) as exc:
                    raise ValueError(f"{self.log_path}:{lineno}: corrupt log line: {exc}") from exc
                g = self.groups.get(key)
                if g is not None and loser_id in g.alive:
                    g.alive.remove(loser_id)
                self._decided.add(rec["matchup_id"])
                self._seq = max(self._seq, int(rec["matchup_id"].lstrip("m")) + 1)

    def candidate_by_id(self, candidate_id: str) -> ServedCandidate | None:
        for g in self.groups.values():
            c = g.by_id.get(candidate_id)
            if c is not None:
                return c
        return None

    def next_matchup(self, rater: str) -> dict | None:
        with self._lock:
            n = len(self._rr_keys)
            for step in range(n):
                key = self._rr_keys[(self._rr_pos + step) % n]
                g = self.groups[key]
                if g.in_flight is not None or len(g.alive) < 2:
                    continue
                self._rr_pos = (self._rr_pos + step + 1) % n
                ia, ib = self._rng.choice(len(g.alive), size=2, replace=False)
                a, b = g.by_id[g.alive[int(ia)]], g.by_id[g.alive[int(ib)]]
                left, right = (a, b) if self._rng.random() < 0.5 else (b, a)
                matchup_id = f"m{self._seq:06d}"
                self._seq += 1
                g.in_flight = {
                    "matchup_id": matchup_id,
                    "left": left,
                    "right": right,
                    "rater": rater,
                }
                return {
                    "matchup_id": matchup_id,
                    "left_png_url": f"/img/{left.candidate_id}.png",
                    "right_png_url": f"/img/{right.candidate_id}.png",
                    "group": f"{key[0]}/{key[1]:03d}",
                    "progress": g.progress(),
                }
            return None

    def choice(self, matchup_id: str, winner_side: str, rater: str) -> tuple[int, str]:
        """Returns (http_status, message)."""
        if winner_side not in ("left", "right"):
            return 400, f"winner must be 'left' or 'right', got {winner_side!r}"
        with self._lock:
            if matchup_id in self._decided:
                return 409, f"matchup {matchup_id} already decided"
            for g in self.groups.values():
                fl = g.in_flight
                if fl is not None and fl["matchup_id"] == matchup_id:
                    rec = matchup_record(
                        matchup_id, g.key, fl["left"], fl["right"], winner_side, rater,
                        pool_size=g.total,
                    )
                    with open(self.log_path, "a") as fh:
                        fh.write(json.dumps(rec) + "\n")
                        fh.flush()
                    loser = fl["right"] if winner_side == "left" else fl["left"]
                    g.alive.remove(loser.candidate_id)
                    g.in_flight = None
                    self._decided.add(matchup_id)
                    return 200, "recorded"
            return 404, f"unknown matchup {matchup_id}"

    def status(self) -> dict:
        with self._lock:
            return {
                f"{k[0]}/{k[1]:03d}": {
                    "pool": len(g.alive),
                    "total": g.total,
                    "done": g.done,
                    "complete": g.complete,
                    "in_flight": g.in_flight is not None,
                }
                for k, g in self.groups.items()
            }

    def all_complete(self) -> bool:
        with self._lock:
            return all(g.complete for g in self.groups.values())

    def winners(self) -> list[ServedCandidate]:
        with self._lock:
            return [g.by_id[g.alive[0]] for g in self.groups.values() if g.complete]


def export_prefs(log_path: str | Path, data_root: str | Path) -> list[LabeledPair]:
    """Winners of completed groups as good-labeled pairs, straight from the log.

    A group is complete when its decided matchups number one less than its
    participants; the winner is the lone participant that never lost.
    Corrupt lines abort with their line number.
    """
    log_path = Path(log_path)
    data_root = Path(data_root)
    participants: dict[tuple[str, int], dict[str, dict]] = {}
    losers: dict[tuple[str, int], set[str]] = {}
    counts: dict[tuple[str, int], int] = {}
    pools: dict[tuple[str, int], int] = {}
    if log_path.exists():
        with open(log_path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                    key = (rec["group"][0], int(rec["group"][1]))
                    for side in ("left", "right"):
                        participants.setdefault(key, {})[rec[side]["id"]] = rec[side]
                    loser_side = "right" if rec["winner"] == "left" else "left"
                    losers.setdefault(key, set()).add(rec[loser_side]["id"])
                    counts[key] = counts.get(key, 0) + 1
                    pools[key] = int(rec["pool"])
                except (json.JSONDecodeError, KeyError, IndexError, ValueError) as exc:
                    raise ValueError(f"{log_path}:{lineno}: corrupt log line: {exc}") from exc

    pairs: list[LabeledPair] = []
    for key in sorted(participants):
        ids = participants[key]
        lost = losers.get(key, set())
        standing = [cid for cid in ids if cid not in lost]
        # complete iff every pool member was eliminated but one
        if len(standing) != 1 or counts[key] != pools[key] - 1:
            continue
        ref = ids[standing[0]]
        z0 = read_image(data_root / ref["z0"])
        z1 = read_image(data_root / ref["img"])
        pairs.append(LabeledPair(z0=z0, z1=z1, r=0, subject=key[0], slice_id=key[1]))
    return pairs


# ---------------------------------------------------------------------------
# HTTP layer


class _Handler(BaseHTTPRequestHandler):
    coordinator: TournamentCoordinator  # set by make_server

    def log_message(self, fmt, *args):  # silence request logging
        pass

    def _json(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self) -> None:
        url = urlparse(self.path)
        if url.path == "/api/next":
            rater = parse_qs(url.query).get("rater", ["anon"])[0]
            m = self.coordinator.next_matchup(rater)
            if m is None:
                self.send_response(204)
                self.end_headers()
            else:
                self._json(200, m)
        elif url.path == "/api/status":
            self._json(200, self.coordinator.status())
        elif url.path.startswith("/img/") and url.path.endswith(".png"):
            cid = url.path[len("/img/") : -len(".png")]
            cand = self.coordinator.candidate_by_id(cid)
            if cand is None:
                self._json(404, {"error": f"unknown candidate {cid}"})
                return
            img = read_image(self.coordinator.data_root / cand.img)
            body = png_bytes(img)
            self.send_response(200)
            self.send_header("Content-Type", "image/png")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)
        elif url.path == "/" or url.path == "/index.html":
            self._serve_ui()
        else:
            self._json(404, {"error": f"no such path {url.path}"})

    def _serve_ui(self) -> None:
        ui = Path(__file__).parent / "static" / "index.html"
        if not ui.exists():
            self._json(404, {"error": "web UI not built"})
            return
        body = ui.read_bytes()
        self.send_response(200)
        self.send_header("Content-Type", "text/html")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self) -> None:
        url = urlparse(self.path)
        if url.path != "/api/choice":
            self._json(404, {"error": f"no such path {url.path}"})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            payload = json.loads(self.rfile.read(length) or b"{}")
            matchup_id = payload["matchup_id"]
            winner = payload["winner"]
            rater = payload.get("rater", "anon")
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            self._json(400, {"error": f"malformed body: {exc}"})
            return
        status, msg = self.coordinator.choice(matchup_id, winner, rater)
        self._json(status, {"status": msg})


def make_server(
    coordinator: TournamentCoordinator, host: str = "127.0.0.1", port: int = 0
) -> ThreadingHTTPServer:
    handler = type("BoundHandler", (_Handler,), {"coordinator": coordinator})
    return ThreadingHTTPServer((host, port), handler)
