"""HTTP server for manual labeling and blind preference voting.

Serves a completed (or partially completed) run directory:

- ``GET /queue``   estimates still awaiting a manual label, ordered by
  sample id; labeling an item removes it from the queue.
- ``POST /label``  append a manual label to the run's label store.
- ``GET /pairs``   preference pairs with the two estimates under opaque
  a/b slots; which side holds which model is a server-side secret,
  assigned by a seeded, exactly balanced shuffle and persisted to
  ``ab_assignments.jsonl``.
- ``POST /vote``   record a session's choice; the last vote per
  (session, pair) wins, full history is retained in ``votes.jsonl``.
- ``GET /votes``   the calling session's effective votes.

Every response carries an ``X-Session`` token (assigned when the client
sends none). Images are served as static files plus opaque per-pair
endpoints that do not reveal which iteration produced which side.
"""

from __future__ import annotations

import json
import os
import threading
import time
import uuid
from dataclasses import dataclass
from typing import Optional

from fastapi import FastAPI, HTTPException, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import FileResponse
from fastapi.staticfiles import StaticFiles

from .core import PipelineError, rng_for, sha256_hex
from .dataio import LabelStore, read_jsonl

MANUAL_LABELS = ("positive", "negative", "ambiguous")
SLOTS = ("a", "b")


def pair_key(condition_id: str, win_iter: int, lose_iter: int) -> str:
    """Opaque, stable pair identifier (no iteration info recoverable)."""
    return sha256_hex(f"pair|{condition_id}|{win_iter}|{lose_iter}".encode())[:16]


@dataclass
class PairSlot:
    pair_id: str
    condition_id: str
    win_iter: int
    lose_iter: int
    a_side: str  # "win" or "lose"

    def iter_for(self, slot: str) -> int:
        side = self.a_side if slot == "a" else ("lose" if self.a_side == "win" else "win")
        return self.win_iter if side == "win" else self.lose_iter


class LabelServer:
    """State and storage behind the HTTP endpoints; one writer at a time."""

    def __init__(self, run_dir: str, seed: int = 0):
        self.run_dir = os.path.abspath(run_dir)
        self.seed = seed
        self.lock = threading.Lock()
        ledger_path = os.path.join(self.run_dir, "ledger.json")
        if not os.path.exists(ledger_path):
            raise PipelineError(f"no ledger.json in {run_dir}; not a run directory")
        with open(ledger_path, "r", encoding="utf-8") as fh:
            ledger = json.load(fh)
        iterations = sorted(e["iteration"] for e in ledger.get("iterations", []))
        if not iterations:
            raise PipelineError(f"run {run_dir} has no completed iterations")
        self.latest_iter = iterations[-1]

        with open(os.path.join(self.run_dir, "datasets.json"), "r", encoding="utf-8") as fh:
            self.dataset_paths = json.load(fh)
        with open(
            os.path.join(self.dataset_paths["pool"], "manifest.json"),
            "r",
            encoding="utf-8",
        ) as fh:
            manifest = json.load(fh)
        self.pool_rgb = {
            s["sample_id"]: os.path.join(self.dataset_paths["pool"], s["rgb"])
            for s in manifest["samples"]
        }
        self.estimates_dir = os.path.join(
            self.run_dir, f"iter_{self.latest_iter}", "albedos"
        )
        self.store = LabelStore(os.path.join(self.run_dir, "labels.jsonl"))
        self.votes_path = os.path.join(self.run_dir, "votes.jsonl")
        self.pairs = self._load_assignments()
        self.votes = self._load_votes()

    # -- assignments --------------------------------------------------------

    def _load_assignments(self) -> dict:
        """Load the persisted a/b mapping, creating it on first start.

        Placement is exactly balanced: a seeded permutation of the sorted
        pair ids alternates which side gets the winner."""
        path = os.path.join(self.run_dir, "ab_assignments.jsonl")
        if os.path.exists(path):
            rows = read_jsonl(path)
            return {
                r["pair_id"]: PairSlot(
                    r["pair_id"], r["condition_id"], r["win_iter"],
                    r["lose_iter"], r["a_side"],
                )
                for r in rows
            }
        manifest_path = os.path.join(self.run_dir, "pairs.jsonl")
        if not os.path.exists(manifest_path):
            return {}
        rows = read_jsonl(manifest_path)
        entries = sorted(
            (pair_key(r["condition_id"], r["win_iter"], r["lose_iter"]), r)
            for r in rows
        )
        perm = rng_for(self.seed, "ab-assign").permutation(len(entries))
        a_side = {}
        for rank, idx in enumerate(perm):
            a_side[entries[idx][0]] = "win" if rank % 2 == 0 else "lose"
        out = {}
        with open(path, "w", encoding="utf-8") as fh:
            for pid, r in entries:
                slot = PairSlot(pid, r["condition_id"], r["win_iter"],
                                r["lose_iter"], a_side[pid])
                out[pid] = slot
                fh.write(json.dumps({
                    "pair_id": pid,
                    "condition_id": slot.condition_id,
                    "win_iter": slot.win_iter,
                    "lose_iter": slot.lose_iter,
                    "a_side": slot.a_side,
                }, sort_keys=True))
                fh.write("\n")
        return out

    def _load_votes(self) -> dict:
        votes = {}
        if os.path.exists(self.votes_path):
            for row in read_jsonl(self.votes_path):
                votes[(row["session"], row["pair_id"])] = row["winner"]
        return votes

    # -- queue and labels ----------------------------------------------------

    def unlabeled_ids(self) -> list:
        labeled = set(self.store.effective())
        return sorted(sid for sid in self.pool_rgb if sid not in labeled)

    def add_label(self, sample_id: str, label: str) -> dict:
        if label not in MANUAL_LABELS:
            raise HTTPException(400, f"unknown label {label!r}; use one of {MANUAL_LABELS}")
        if sample_id not in self.pool_rgb:
            raise HTTPException(404, f"unknown sample {sample_id!r}")
        with self.lock:
            rec = self.store.append(
                sample_id, label, "manual", iteration=self.latest_iter
            )
        return {"sample_id": rec.sample_id, "label": rec.label,
                "provenance": rec.provenance}

    # -- votes ---------------------------------------------------------------

    def add_vote(self, session: str, pair_id: str, winner: str) -> dict:
        if winner not in SLOTS:
            raise HTTPException(400, f"winner must be 'a' or 'b', got {winner!r}")
        slot = self.pairs.get(pair_id)
        if slot is None:
            raise HTTPException(404, f"unknown pair {pair_id!r}")
        row = {
            "session": session,
            "pair_id": pair_id,
            "winner": winner,
            "winner_iter": slot.iter_for(winner),
            "timestamp": time.time(),
        }
        with self.lock:
            with open(self.votes_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row, sort_keys=True))
                fh.write("\n")
            self.votes[(session, pair_id)] = winner
        return {"pair_id": pair_id, "winner": winner}

    def session_votes(self, session: str) -> dict:
        return {pid: w for (s, pid), w in self.votes.items() if s == session}

    def estimate_path(self, pair_id: str, slot: str) -> str:
        pair = self.pairs.get(pair_id)
        if pair is None:
            raise HTTPException(404, f"unknown pair {pair_id!r}")
        if slot not in SLOTS:
            raise HTTPException(404, f"unknown slot {slot!r}")
        it = pair.iter_for(slot)
        # pairs are judged on the shared-draw re-inference, so serve those
        # images when present; fall back to the loop's own pool estimates
        shared = os.path.join(
            self.run_dir, "pair_albedos", f"iter_{it}", f"{pair.condition_id}.png"
        )
        if os.path.exists(shared):
            return shared
        return os.path.join(
            self.run_dir, f"iter_{it}", "albedos", f"{pair.condition_id}.png"
        )


def build_app(run_dir: str, seed: int = 0) -> FastAPI:
    server = LabelServer(run_dir, seed=seed)
    app = FastAPI(title="albedoadapt label server")
    app.state.server = server
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
        expose_headers=["X-Session"],
    )

    @app.middleware("http")
    async def session_token(request: Request, call_next):
        token = request.headers.get("X-Session") or uuid.uuid4().hex[:16]
        request.state.session = token
        response = await call_next(request)
        response.headers["X-Session"] = token
        return response

    @app.get("/")
    def health():
        return {
            "status": "ok",
            "run": server.run_dir,
            "iteration": server.latest_iter,
            "pairs": len(server.pairs),
            "unlabeled": len(server.unlabeled_ids()),
        }

    @app.get("/queue")
    def queue(limit: Optional[int] = None):
        ids = server.unlabeled_ids()
        total = len(ids)
        if limit is not None:
            if limit < 0:
                raise HTTPException(400, "limit must be >= 0")
            ids = ids[:limit]
        return {
            "items": [
                {
                    "sample_id": sid,
                    "estimate_url": f"/item/{sid}/estimate",
                    "condition_url": f"/item/{sid}/condition",
                }
                for sid in ids
            ],
            "total_unlabeled": total,
        }

    @app.post("/label")
    async def label(request: Request):
        body = await request.json()
        for key in ("sample_id", "label"):
            if key not in body:
                raise HTTPException(400, f"missing field {key!r}")
        return server.add_label(str(body["sample_id"]), str(body["label"]))

    @app.get("/pairs")
    def pairs(request: Request, limit: Optional[int] = None):
        session = request.state.session
        voted = server.session_votes(session)
        ordered = sorted(server.pairs)
        if limit is not None:
            if limit < 0:
                raise HTTPException(400, "limit must be >= 0")
            ordered = ordered[:limit]
        return {
            "pairs": [
                {
                    "pair_id": pid,
                    "condition_url": f"/item/{server.pairs[pid].condition_id}/condition",
                    "a_url": f"/pair_image/{pid}/a",
                    "b_url": f"/pair_image/{pid}/b",
                    "voted": voted.get(pid),
                }
                for pid in ordered
            ],
            "total": len(server.pairs),
        }

    @app.post("/vote")
    async def vote(request: Request):
        body = await request.json()
        for key in ("pair_id", "winner"):
            if key not in body:
                raise HTTPException(400, f"missing field {key!r}")
        return server.add_vote(
            request.state.session, str(body["pair_id"]), str(body["winner"])
        )

    @app.get("/votes")
    def votes(request: Request):
        return {"votes": server.session_votes(request.state.session)}

    @app.get("/item/{sample_id}/estimate")
    def item_estimate(sample_id: str):
        path = os.path.join(server.estimates_dir, f"{sample_id}.png")
        if sample_id not in server.pool_rgb or not os.path.exists(path):
            raise HTTPException(404, f"unknown sample {sample_id!r}")
        return FileResponse(path, media_type="image/png")

    @app.get("/item/{sample_id}/condition")
    def item_condition(sample_id: str):
        path = server.pool_rgb.get(sample_id)
        if path is None or not os.path.exists(path):
            raise HTTPException(404, f"unknown sample {sample_id!r}")
        return FileResponse(path, media_type="image/png")

    @app.get("/pair_image/{pair_id}/{slot}")
    def pair_image(pair_id: str, slot: str):
        path = server.estimate_path(pair_id, slot)
        if not os.path.exists(path):
            raise HTTPException(404, "estimate image missing on disk")
        return FileResponse(path, media_type="image/png")

    app.mount("/static", StaticFiles(directory=server.run_dir), name="static")
    return app
