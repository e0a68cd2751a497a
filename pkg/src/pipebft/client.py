"""Benchmark client process: drives many logical clients in a closed loop.

Each logical client keeps at most num_req requests outstanding, submits to
the primary, and completes requests per the protocol rule: f+1 matching
results for the three-phase protocol, or the speculative collection rules
(all-n fast path, certificate fallback after the timeout).  One process
multiplexes its share of logical clients over a single connection set.
"""

from __future__ import annotations

import argparse
import heapq
import json
import sys
import time
from pathlib import Path

from .config import ExperimentConfig, load_experiment_config
from .crypto import KeyStore
from .messages import (
    CertAck,
    ClientResponse,
    SpecResponse,
    encode_message,
)
from .metrics import LatencyLog, write_metrics_csv
from .pipeline import WorkQueue
from .safety import SafetyViolation
from .transport import Mesh, PeerUnreachable
from .workload import PbftResponseTracker, RequestFactory
from .zyzzyva import (
    CERT_COMMITTED,
    FAILED,
    FAST_COMPLETE,
    SpecRequestTracker,
)


class ClientProcess:
    def __init__(self, cfg: ExperimentConfig, proc_index: int, addresses, keys: KeyStore,
                 run_dir: str | Path):
        self.cfg = cfg
        self.proc_index = proc_index
        self.my_id = cfg.n + proc_index
        self.cluster = cfg.cluster_for(self.my_id, addresses)
        self.keys = keys
        self.run_dir = Path(run_dir)
        self.addresses = addresses
        self.counters: dict = {}
        self.inbox = WorkQueue()
        self.mesh = Mesh(self.my_id, cfg.n,
                         lambda sender, msg, frame: self.inbox.put(msg),
                         input_replica_threads=1, output_threads=1,
                         counters=self.counters)
        wl = cfg.workload
        self.logical_clients = [c for c in range(wl.num_clients)
                                if c % cfg.num_client_procs == proc_index]
        scheme = cfg.scheme.client_scheme
        sign_fn = lambda data: self.keys.sign(self.my_id, None, data, scheme)
        self.factories = {c: RequestFactory(wl, c, cfg.seed, sign_fn)
                          for c in self.logical_clients}
        self.trackers: dict[tuple[int, int], object] = {}
        self.deadlines: list[tuple[float, int, int]] = []
        self.latency = LatencyLog(self.run_dir / f"latency_{proc_index}.csv")
        self.issuing = True
        self.spec_timeout = cfg.spec_timeout_ms / 1000.0
        self.request_timeout = cfg.request_timeout_ms / 1000.0
        self._verify = cfg.client_verify_responses

    def _count(self, key: str, by: int = 1) -> None:
        self.counters[key] = self.counters.get(key, 0) + by

    # -- submission ------------------------------------------------------------

    def _submit(self, client_id: int) -> None:
        if not self.issuing:
            return
        req = self.factories[client_id].next_request()
        now = time.time_ns()
        mono = time.monotonic()
        key = (client_id, req.request_seq)
        if self.cfg.protocol == "pbft":
            tracker = PbftResponseTracker(client_id, req.request_seq, now,
                                          mono + self.request_timeout)
            heapq.heappush(self.deadlines, (tracker.deadline, client_id, req.request_seq))
        else:
            tracker = SpecRequestTracker(client_id, req.request_seq, mono, self.spec_timeout)
            tracker.submit_ns = now
            heapq.heappush(self.deadlines, (tracker.deadline, client_id, req.request_seq))
        self.trackers[key] = tracker
        self.mesh.send_frame(self.cluster.primary, encode_message(req))
        self._count("submitted")

    def _finish(self, key, tracker, outcome: str, keep: bool = False) -> None:
        if not keep:
            self.trackers.pop(key, None)
        self.latency.record(key[0], key[1], tracker.submit_ns, time.time_ns(), outcome)
        self._count(f"outcome_{outcome}")
        self._submit(key[0])

    # -- response handling ---------------------------------------------------------

    def _on_client_response(self, msg: ClientResponse) -> None:
        key = (msg.client_id, msg.request_seq)
        tracker = self.trackers.get(key)
        if tracker is None or not isinstance(tracker, PbftResponseTracker):
            self._count("late_response")
            return
        if self._verify and not self.keys.verify(msg.replica_id, self.my_id,
                                                 msg.signed_portion, msg.signature):
            self._count("bad_response_sig")
            return
        result = tracker.on_response(msg.replica_id, msg.results,
                                     self.cluster.response_quorum())
        if result == "ok":
            if tracker.mismatched():
                self._count("mismatched_results")
            # keep watching stragglers for contradictory quorums
            self._finish(key, tracker, "ok", keep=True)
        elif result == "safety_violation":
            raise SafetyViolation(
                f"request {key}: two result values reached f+1 matching responses")
        if tracker.complete and tracker.heard_all(self.cluster.n):
            self.trackers.pop(key, None)

    def _on_spec_response(self, msg: SpecResponse) -> None:
        key = (msg.client_id, msg.request_seq)
        tracker = self.trackers.get(key)
        if tracker is None or not isinstance(tracker, SpecRequestTracker):
            self._count("late_response")
            return
        if self._verify and not self.keys.verify(msg.replica_id, self.my_id,
                                                 msg.signed_portion, msg.signature):
            self._count("bad_response_sig")
            return
        if tracker.on_response(msg, self.cluster.n) == FAST_COMPLETE:
            self._finish(key, tracker, FAST_COMPLETE)

    def _on_cert_ack(self, msg: CertAck) -> None:
        key = (msg.client_id, msg.request_seq)
        tracker = self.trackers.get(key)
        if tracker is None or not isinstance(tracker, SpecRequestTracker):
            return
        if tracker.on_ack(msg, self.cluster.commit_quorum()) == CERT_COMMITTED:
            self._finish(key, tracker, CERT_COMMITTED)

    def _check_deadlines(self) -> None:
        now = time.monotonic()
        while self.deadlines and self.deadlines[0][0] <= now:
            _, client_id, request_seq = heapq.heappop(self.deadlines)
            key = (client_id, request_seq)
            tracker = self.trackers.get(key)
            if tracker is None:
                continue
            if isinstance(tracker, PbftResponseTracker):
                self.trackers.pop(key, None)
                if tracker.complete:
                    continue  # completed long ago; stragglers never showed up
                self._count("request_timeout")
                self.latency.record(client_id, request_seq, tracker.submit_ns,
                                    time.time_ns(), "timeout_resubmit")
                self._submit(client_id)
                continue
            if tracker.cert_sent:
                # second deadline: certificate acks never arrived
                if tracker.mismatched():
                    self._count("mismatched_results")
                self._count("cert_ack_timeout")
                self._finish(key, tracker, FAILED)
                continue
            outcome, cert = tracker.on_timeout(self.cluster.commit_quorum())
            if outcome == FAILED:
                self._count("resubmits")
                self._finish(key, tracker, FAILED)
            else:
                if tracker.mismatched():
                    self._count("mismatched_results")
                frame = encode_message(cert)
                self.mesh.broadcast_frame(self.cluster.replica_ids, frame)
                self._count("certs_sent")
                # acks are on their way once the certificate is out; only the
                # global request timeout abandons the slow path
                tracker.deadline = now + self.request_timeout
                heapq.heappush(self.deadlines, (tracker.deadline, client_id, request_seq))

    # -- main loop -----------------------------------------------------------------

    def run(self) -> None:
        self.mesh.start(None)
        primary = self.cluster.primary
        for rid in self.cluster.replica_ids:
            try:
                self.mesh.connect(rid, tuple(self.addresses[rid]),
                                  retry_window=20.0 if rid == primary else 3.0)
            except PeerUnreachable:
                # failed backups may already be down; the completion rules
                # cope with their silence
                if rid == primary:
                    raise
                self._count("replica_unreachable")
        start_wall = time.time_ns()
        deadline = time.monotonic() + self.cfg.duration_s
        window = self.cfg.workload.num_req
        for client_id in self.logical_clients:
            for _ in range(window):
                self._submit(client_id)
        while time.monotonic() < deadline:
            self._pump(0.005)
        self.issuing = False
        grace = time.monotonic() + min(2.0, self.cfg.duration_s)
        while self.trackers and time.monotonic() < grace:
            self._pump(0.01)
        self._count("unfinished", len(self.trackers))
        self.latency.close()
        write_metrics_csv(
            self.run_dir / f"client_metrics_{self.proc_index}.csv",
            self.counters, {},
            {"start_wall_ns": start_wall, "end_wall_ns": time.time_ns(),
             "proc_index": self.proc_index},
        )
        self.mesh.stop()

    def _pump(self, timeout: float) -> None:
        msgs = self.inbox.drain(max_items=2048, timeout=timeout)
        for msg in msgs:
            t = type(msg)
            if t is ClientResponse:
                self._on_client_response(msg)
            elif t is SpecResponse:
                self._on_spec_response(msg)
            elif t is CertAck:
                self._on_cert_ack(msg)
            else:
                self._count("unknown_route")
        self._check_deadlines()


def client_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="pipebft-client")
    parser.add_argument("--config", required=True)
    parser.add_argument("--cluster", required=True)
    parser.add_argument("--proc-index", type=int, required=True)
    parser.add_argument("--run-dir", required=True)
    args = parser.parse_args(argv)

    cfg = load_experiment_config(args.config)
    meta = json.loads(Path(args.cluster).read_text())
    addresses = {int(k): (v[0], int(v[1])) for k, v in meta["addresses"].items()}
    keys = KeyStore.load(meta["keyfile"], cfg.n + args.proc_index)
    proc = ClientProcess(cfg, args.proc_index, addresses, keys, args.run_dir)
    try:
        proc.run()
    except SafetyViolation as exc:
        print(f"SAFETY VIOLATION: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(client_main())
