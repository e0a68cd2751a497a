"""Replica runtime: the threaded pipeline wired to transport and consensus.

Stage ownership follows one rule: cross-stage communication is queues only.
Input threads decode and route; batch threads (primary) form proposals over
fresh sequence ranges; the single worker owns consensus instances; the single
executor owns the chain and the value store and drains the execution queue
array strictly in order; the checkpoint thread tracks checkpoint quorums and
hands pruning back to the worker.  Topologies with 0 execute / 0 batch
threads fold those stages into the worker loop.
"""

from __future__ import annotations

import argparse
import json
import os
import signal
import struct
import sys
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from .config import ClusterConfig, ExperimentConfig, load_experiment_config
from .crypto import KeyStore
from .ledger import Blockchain, make_state_store
from .messages import (
    CheckpointMsg,
    ClientRequest,
    Commit,
    CommitCertificate,
    PrePrepare,
    Prepare,
    checkpoint_signed_portion,
    encode_message,
)
from .pbft import ConsensusInstance, PbftEngine
from .pipeline import (
    BufferPool,
    CheckpointCoordinator,
    ExecutionQueueArray,
    UnknownRoute,
    UtilizationRegistry,
    WorkQueue,
)
from .transport import Mesh
from .zyzzyva import InvalidCertificate, ZyzzyvaEngine


@dataclass(slots=True)
class ExecutedNotice:
    seq: int


@dataclass(slots=True)
class PruneNotice:
    stable_seq: int
    established: list


class ReplicaNode:
    def __init__(self, cfg: ExperimentConfig, cluster: ClusterConfig, keys: KeyStore,
                 run_dir: str | Path | None = None):
        self.cfg = cfg
        self.cluster = cluster
        self.keys = keys
        self.run_dir = Path(run_dir) if run_dir else None
        self.counters: dict = {}
        self.registry = UtilizationRegistry()
        self.stop_event = threading.Event()

        topo = cfg.topology
        self.batch_q = WorkQueue()
        self.work_q = WorkQueue()
        self.ckpt_q = WorkQueue()
        self.exec_array = ExecutionQueueArray(cfg.qc)
        self.chain = Blockchain(cluster.primary_of(0))
        store_path = (self.run_dir / f"state_{cluster.my_id}.db") if self.run_dir else None
        if cfg.storage == "filebacked" and store_path is None:
            raise ValueError("filebacked storage needs a run directory")
        self.store = make_state_store(cfg.storage, cfg.workload.active_set, store_path)
        self.next_exec_seq = 0

        self.instance_pool = (
            BufferPool(lambda: ConsensusInstance(0), ConsensusInstance.reset,
                       size=cfg.pool_size, prefill=False)
            if cfg.pool_size > 0 else None
        )

        self.mesh = Mesh(
            cluster.my_id, cluster.n, self._on_message,
            input_replica_threads=max(1, topo.input_threads - 1),
            output_threads=topo.output_threads,
            registry=self.registry, counters=self.counters,
        )
        engine_cls = PbftEngine if cfg.protocol == "pbft" else ZyzzyvaEngine
        self.engine = engine_cls(
            cluster, keys, cfg.scheme, cfg.qc,
            broadcast=self._broadcast_replicas,
            send_client=self._send_client,
            schedule=self.exec_array.schedule,
            counters=self.counters,
            instance_pool=self.instance_pool,
        )
        self.checkpoints = CheckpointCoordinator(
            cfg.checkpoint_delta, cluster.checkpoint_quorum(),
            emit_checkpoint=self._emit_checkpoint,
            on_stable=lambda seq, est: self.work_q.put(
                (cluster.my_id, PruneNotice(seq, est))),
        )
        self._batch_log = None
        if self.run_dir and (cfg.log_batches == "all" or
                             (cfg.log_batches == "primary" and cluster.is_primary())):
            self._batch_log = open(self.run_dir / f"batches_{cluster.my_id}.log", "wb",
                                   buffering=1 << 20)
        self._threads: list[threading.Thread] = []
        self._fatal: BaseException | None = None

    # -- wiring ---------------------------------------------------------------

    def _broadcast_replicas(self, msg) -> None:
        frame = encode_message(msg)
        self.mesh.broadcast_frame(self.cluster.replica_ids, frame)

    def _send_client(self, proc_id: int, msg) -> None:
        self.mesh.send_frame(proc_id, encode_message(msg))

    def route(self, msg) -> WorkQueue:
        """Queue for a decoded message type; raises UnknownRoute."""
        t = type(msg)
        if t is ClientRequest:
            return self.batch_q
        if t in (PrePrepare, Prepare, Commit, CommitCertificate):
            return self.work_q
        if t is CheckpointMsg:
            return self.ckpt_q
        raise UnknownRoute(f"no route for {t.__name__} at a replica")

    def _on_message(self, sender: int, msg, frame: bytes) -> None:
        t = type(msg)
        if t is ClientRequest:
            if self.cluster.is_primary():
                self.batch_q.put(msg)
            else:
                # backups forward client requests to the primary untouched
                self.mesh.send_frame(self.cluster.primary, frame)
                self._count("forwarded_to_primary")
            return
        if t in (PrePrepare, Prepare, Commit, CommitCertificate):
            self.work_q.put((sender, msg))
        elif t is CheckpointMsg:
            self.ckpt_q.put((sender, msg))
        else:
            self._count("unknown_route")

    def _count(self, key: str, by: int = 1) -> None:
        self.counters[key] = self.counters.get(key, 0) + by

    # -- lifecycle ---------------------------------------------------------------

    def listen(self, addr: tuple[str, int]) -> int:
        """Bind and start transport threads; dialing happens in start()."""
        self._listening = True
        return self.mesh.start(addr)

    def start(self, addresses: dict[int, tuple[str, int]], retry_window: float = 15.0) -> None:
        if not getattr(self, "_listening", False):
            self.listen(addresses[self.cluster.my_id])
        self.mesh.connect_mesh(addresses, retry_window)
        deadline = time.monotonic() + retry_window
        expected = set(self.cluster.replica_ids) - {self.cluster.my_id}
        while time.monotonic() < deadline:
            if expected.issubset(self.mesh.connected_ids()):
                break
            time.sleep(0.05)

        topo = self.cfg.topology
        if self.cluster.is_primary():
            for i in range(topo.batch_threads):
                self._spawn(self._batch_loop, f"batch_{i}")
        self._spawn(self._worker_loop, "worker")
        if topo.execute_threads == 1:
            self._spawn(self._execute_loop, "execute")
        self._spawn(self._checkpoint_loop, "checkpoint")

    def _spawn(self, target, role: str) -> None:
        t = threading.Thread(target=self._guarded, args=(target, role),
                             name=f"{role}@{self.cluster.my_id}", daemon=True)
        t.start()
        self._threads.append(t)

    def _guarded(self, target, role: str) -> None:
        try:
            target(role)
        except BaseException as exc:  # noqa: BLE001 - any stage death is fatal
            self._fatal = exc
            self.stop_event.set()

    def shutdown(self, drain_timeout: float = 6.0) -> None:
        """Drain committed work, stop threads, dump artifacts."""
        deadline = time.monotonic() + drain_timeout
        quiet_since = None
        while time.monotonic() < deadline and not self.stop_event.is_set():
            busy = (len(self.batch_q) + len(self.work_q) + self.exec_array.pending())
            if busy == 0:
                if quiet_since is None:
                    quiet_since = time.monotonic()
                elif time.monotonic() - quiet_since > 0.5:
                    break
            else:
                quiet_since = None
            time.sleep(0.05)
        self.stop_event.set()
        for t in self._threads:
            t.join(timeout=2.0)
        self.mesh.stop()
        self._dump_artifacts()
        if self._batch_log is not None:
            self._batch_log.close()
        self.store.close()

    def _dump_artifacts(self) -> None:
        if not self.run_dir:
            return
        rid = self.cluster.my_id
        self.chain.write_dump(self.run_dir / f"chain_{rid}.dump")
        (self.run_dir / f"state_{rid}.sha").write_text(self.store.state_hash().hex() + "\n")
        if self.instance_pool is not None:
            for k, v in self.instance_pool.stats().items():
                self.counters[f"pool_instance.{k}"] = v
        extra = {
            "chain_height": self.chain.height,
            "next_exec_seq": self.next_exec_seq,
            "replica_id": rid,
            "fatal": repr(self._fatal) if self._fatal else "",
        }
        from .metrics import write_metrics_csv

        write_metrics_csv(self.run_dir / f"metrics_{rid}.csv", self.counters,
                          self.registry.thread_utilization(), extra)

    # -- stage loops ------------------------------------------------------------------

    def _batch_gated(self) -> bool:
        """Backpressure: stop forming batches while the primary's own executor
        is too far behind the sequence counter.  Keeps the in-flight window
        comfortably inside QC so execution-queue slots can never collide;
        requests simply wait in the batch queue (bounded by client windows)."""
        cfg = self.cfg
        # concurrent formers can overshoot the gate by one batch each; for
        # batch sizes approaching QC the clamp keeps the gate operable (the
        # queue array tolerates the bounded overshoot)
        margin = min(cfg.batch_size * max(1, cfg.topology.batch_threads),
                     max(1, cfg.qc // 2))
        lag = self.engine.assigner.next_seq - self.engine.exec_progress
        return lag > cfg.qc - margin

    def _batch_loop(self, role: str) -> None:
        clock = self.registry.clock(role)
        cfg = self.cfg
        flush = cfg.batch_timeout_ms / 1000.0
        while not self.stop_event.is_set():
            if self._batch_gated():
                self._count("batch_backpressure")
                time.sleep(0.002)
                continue
            reqs = self.batch_q.collect(cfg.batch_size, flush, idle_timeout=0.05)
            if not reqs:
                continue
            t0 = clock.begin()
            self.engine.primary_on_request_batch(reqs)
            clock.end(t0)

    def _worker_loop(self, role: str) -> None:
        clock = self.registry.clock(role)
        cfg = self.cfg
        merge_batch = self.cluster.is_primary() and cfg.topology.batch_threads == 0
        merge_exec = cfg.topology.execute_threads == 0
        merged = merge_batch or merge_exec
        flush = cfg.batch_timeout_ms / 1000.0
        pending_batch: list = []
        batch_deadline = 0.0
        timeout = 0.004 if merged else 0.05
        while not self.stop_event.is_set():
            items = self.work_q.drain(max_items=512, timeout=timeout)
            if items:
                t0 = clock.begin()
                for sender, msg in items:
                    self._handle_worker_item(sender, msg)
                clock.end(t0)
            if merge_batch:
                t0 = clock.begin()
                pending_batch.extend(self.batch_q.drain(
                    max_items=cfg.batch_size - len(pending_batch), timeout=0))
                now = time.monotonic()
                if pending_batch and batch_deadline == 0.0:
                    batch_deadline = now + flush
                if (pending_batch and not self._batch_gated()
                        and (len(pending_batch) >= cfg.batch_size
                             or now >= batch_deadline)):
                    self.engine.primary_on_request_batch(pending_batch)
                    pending_batch = []
                    batch_deadline = 0.0
                clock.end(t0)
            if merge_exec:
                while True:
                    d = self.exec_array.take_next(self.next_exec_seq, timeout=0)
                    if d is None:
                        break
                    t0 = clock.begin()
                    self._execute(d)
                    clock.end(t0)

    def _handle_worker_item(self, sender: int, msg) -> None:
        t = type(msg)
        engine = self.engine
        if t is Prepare:
            engine.on_prepare(msg)
        elif t is Commit:
            engine.on_commit(msg)
        elif t is PrePrepare:
            engine.on_preprepare(msg)
        elif t is CommitCertificate:
            if not isinstance(engine, ZyzzyvaEngine):
                self._count("unknown_route")
                return
            try:
                ack = engine.on_commit_certificate(msg)
            except InvalidCertificate:
                return
            if ack is not None:
                self._send_client(sender, ack)
        elif t is ExecutedNotice:
            engine.handle_executed(msg.seq)
        elif t is PruneNotice:
            engine.prune_below_checkpoint(msg.established, msg.stable_seq)
        else:
            self._count("unknown_route")

    def _execute_loop(self, role: str) -> None:
        clock = self.registry.clock(role)
        while not self.stop_event.is_set():
            d = self.exec_array.take_next(self.next_exec_seq, timeout=0.05)
            if d is None:
                continue
            t0 = clock.begin()
            self._execute(d)
            clock.end(t0)

    def _execute(self, directive) -> None:
        batch = directive.batch
        store = self.store
        results_per_request = [store.apply_operations(req.operations)
                               for req in batch.requests]
        self.chain.append_block(directive.first_seq, directive.digest,
                                directive.view, len(batch.requests))
        if self.cfg.protocol == "pbft":
            responses = self.engine.make_client_responses(batch, results_per_request)
        else:
            responses = self.engine.make_spec_responses(directive, results_per_request)
        mesh = self.mesh
        for proc, msg in responses:
            mesh.send_frame(proc, encode_message(msg))
        if self._batch_log is not None:
            raw = batch.raw
            self._batch_log.write(struct.pack(">QI", directive.first_seq, len(raw)))
            self._batch_log.write(raw)
        self.next_exec_seq = directive.last_seq + 1
        self.engine.exec_progress = self.next_exec_seq
        self._count("executed_batches")
        self._count("executed_requests", len(batch.requests))
        self.checkpoints.note_executed(self.next_exec_seq)
        self.work_q.put((self.cluster.my_id, ExecutedNotice(directive.first_seq)))

    def _emit_checkpoint(self, boundary: int) -> None:
        msg = CheckpointMsg(boundary, self.chain.latest_hash, self.cluster.my_id, None)
        msg.signature = self.keys.sign(
            self.cluster.my_id, list(self.cluster.replica_ids),
            checkpoint_signed_portion(msg), self.cfg.scheme.replica_scheme)
        self._broadcast_replicas(msg)
        self._count("sent_checkpoint")
        self.ckpt_q.put((self.cluster.my_id, msg))

    def _checkpoint_loop(self, role: str) -> None:
        clock = self.registry.clock(role)
        while not self.stop_event.is_set():
            items = self.ckpt_q.drain(timeout=0.1)
            if not items:
                continue
            t0 = clock.begin()
            for sender, msg in items:
                if sender != self.cluster.my_id:
                    if not self.keys.verify(msg.sender_id, self.cluster.my_id,
                                            msg.signed_portion, msg.signature):
                        self._count("bad_sig_checkpoint")
                        continue
                self.checkpoints.on_checkpoint(msg.seq, msg.chain_digest, msg.sender_id)
            clock.end(t0)


def replica_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="pipebft-replica")
    parser.add_argument("--config", required=True)
    parser.add_argument("--cluster", required=True)
    parser.add_argument("--replica-id", type=int, required=True)
    parser.add_argument("--run-dir", required=True)
    args = parser.parse_args(argv)

    sys.setswitchinterval(0.001)
    cfg = load_experiment_config(args.config)
    meta = json.loads(Path(args.cluster).read_text())
    addresses = {int(k): (v[0], int(v[1])) for k, v in meta["addresses"].items()}
    keys = KeyStore.load(meta["keyfile"], args.replica_id)
    cluster = cfg.cluster_for(args.replica_id, addresses)
    node = ReplicaNode(cfg, cluster, keys, run_dir=args.run_dir)

    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    signal.signal(signal.SIGUSR1, lambda *_: setattr(node.mesh, "muted", True))

    node.start(addresses)
    Path(args.run_dir, f"ready_{args.replica_id}").touch()
    debug = os.environ.get("PIPEBFT_DEBUG")
    progress_path = Path(args.run_dir, f"progress_{args.replica_id}")
    last_status = 0.0
    while not stop.is_set() and not node.stop_event.is_set():
        stop.wait(0.2)
        now = time.monotonic()
        if now - last_status > 0.3:
            last_status = now
            # progress beacon: the orchestrator waits for heights to equalize
            # across replicas before asking anyone to shut down
            try:
                progress_path.write_text(f"{node.chain.height} {node.next_exec_seq}\n")
            except OSError:
                pass
            if debug:
                print(f"[r{args.replica_id}] exec={node.next_exec_seq}"
                      f" assigned={node.engine.assigner.next_seq}"
                      f" workq={len(node.work_q)} batchq={len(node.batch_q)}"
                      f" ckptq={len(node.ckpt_q)} pending={node.exec_array.pending()}"
                      f" height={node.chain.height}", file=sys.stderr, flush=True)
    node.shutdown()
    if node._fatal is not None:
        print(f"replica {args.replica_id} died: {node._fatal!r}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(replica_main())
