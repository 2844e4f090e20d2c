"""End-to-end workflow simulator.

Plays the scheduler and launcher: every job acquires phase tokens from the
token manager (submit domain), reads inputs and writes outputs through the
data gateway (data domain) from its execute node (execute domain).  Every
token-bearing message crossing a domain boundary lands in the transcript so
containment can be checked after the run.

Runs are discrete-event simulations.  With the simulated clock they are fully
deterministic for a given seed; with the real clock the loop sleeps until each
event is due.
"""

from __future__ import annotations

import heapq
import itertools
import json
import logging
import random
import tempfile
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from . import _http
from .authz import dominates, reroot
from .clock import Clock, SimulatedClock, SystemClock
from .errors import CaptokError, IssuerUnavailable
from .gateway import (
    AccessPolicy,
    AuditLog,
    DataGateway,
    GatewayConfig,
    KeyCache,
    LocalCache,
    authorize_cached_read,
    make_gateway_server,
    replay_audit,
)
from .issuer import PolicyRule, TokenIssuer, UserDirectory
from .issuer_http import IssuerClient, make_issuer_server
from .manager import Delivery, TokenManager, TokenRequest, Vault, submit_grant
from .tokens import KeySet, Permission, coerce_scope, decode_unverified, print_scope

log = logging.getLogger(__name__)

SUBMIT_ISSUER = "submit→issuer"
SUBMIT_EXECUTE = "submit→execute"
EXECUTE_DATA = "execute→data"
DATA_ISSUER = "data→issuer"
SUBMIT_DATA = "submit→data"

FAULT_CODES = {
    "expire-token": "expired",
    "tamper-token": "signature_invalid",
    "wrong-audience": "audience_mismatch",
    "out-of-scope-path": "insufficient_scope",
    "issuer-outage-window": "issuer_unavailable",
}


# -- workflow description -----------------------------------------------------


@dataclass(frozen=True)
class JobSpec:
    job_id: str
    input_scopes: tuple[Permission, ...] = ()
    output_scopes: tuple[Permission, ...] = ()
    execute_scopes: tuple[Permission, ...] = ()
    duration: float = 60.0
    execute_node: str = "node-0"
    inputs: tuple[str, ...] = ()
    outputs: tuple[str, ...] = ()
    bind_origin: bool = False
    user: str = "alice"

    def __post_init__(self) -> None:
        for name in ("input_scopes", "output_scopes", "execute_scopes"):
            object.__setattr__(self, name, tuple(coerce_scope(getattr(self, name))))
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "outputs", tuple(self.outputs))
        if self.duration <= 0:
            raise ValueError(f"job {self.job_id}: duration must be positive")

    def to_json(self) -> dict[str, Any]:
        return {
            "job_id": self.job_id,
            "input_scopes": print_scope(self.input_scopes),
            "output_scopes": print_scope(self.output_scopes),
            "execute_scopes": print_scope(self.execute_scopes),
            "duration": self.duration,
            "execute_node": self.execute_node,
            "inputs": list(self.inputs),
            "outputs": list(self.outputs),
            "bind_origin": self.bind_origin,
            "user": self.user,
        }

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> JobSpec:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown job fields {sorted(unknown)}")
        return cls(**dict(doc))


@dataclass(frozen=True)
class Fault:
    job_id: str
    type: str
    start: float = 0.0
    end: float = 0.0

    def __post_init__(self) -> None:
        if self.type not in FAULT_CODES:
            raise ValueError(f"unknown fault type {self.type!r}")

    @property
    def code(self) -> str:
        return FAULT_CODES[self.type]


def _default_users() -> dict[str, dict[str, Any]]:
    return {"alice": {"password": "alice-secret", "groups": ["LDGUsers"]}}


def _default_policy(audience: str) -> list[dict[str, Any]]:
    return [
        {
            "group": "LDGUsers",
            "grantable": ["read:/data/ligo/frames", "write:/store/user/{username}"],
            "max_access_lifetime": 600,
            "max_refresh_lifetime": 30 * 24 * 3600,
            "audiences": [audience],
        }
    ]


@dataclass
class RunSettings:
    issuer: str = "https://issuer.example.org"
    audience: str = "https://data.example.org"
    other_audience: str = "https://other-data.example.org"
    access_lifetime: int = 600
    margin: float = 60.0
    skew: float = 60.0
    parallelism: int = 0
    share_cache: bool = True
    seed: int = 0
    clock: str = "simulated"
    transport: str = "inprocess"
    mount_prefix: str = "/"
    key_refetch_interval: float = 3600.0
    introspection: bool = False
    enforce_origin: bool = True
    users: dict[str, dict[str, Any]] = field(default_factory=_default_users)
    policy: list[dict[str, Any]] | None = None
    grant_scopes: dict[str, str] = field(default_factory=dict)
    document_root: str | None = None

    def __post_init__(self) -> None:
        if self.clock not in ("simulated", "real"):
            raise ValueError("clock must be 'simulated' or 'real'")
        if self.transport not in ("inprocess", "http"):
            raise ValueError("transport must be 'inprocess' or 'http'")
        if self.policy is None:
            self.policy = _default_policy(self.audience)

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> RunSettings:
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown settings {sorted(unknown)}")
        return cls(**dict(doc))


@dataclass
class WorkflowRun:
    jobs: list[JobSpec]
    settings: RunSettings = field(default_factory=RunSettings)
    faults: list[Fault] = field(default_factory=list)

    def __post_init__(self) -> None:
        ids = [j.job_id for j in self.jobs]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate job ids")
        unknown = {f.job_id for f in self.faults} - set(ids)
        if unknown:
            raise ValueError(f"faults target unknown jobs {sorted(unknown)}")

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> WorkflowRun:
        return cls(
            jobs=[JobSpec.from_json(j) for j in doc["jobs"]],
            settings=RunSettings.from_json(doc.get("settings", {})),
            faults=[Fault(**f) for f in doc.get("faults", [])],
        )

    @classmethod
    def load(cls, path: str | Path) -> WorkflowRun:
        return cls.from_json(json.loads(Path(path).read_text()))

    def to_json(self) -> dict[str, Any]:
        s = self.settings
        return {
            "settings": {k: getattr(s, k) for k in s.__dataclass_fields__},
            "jobs": [j.to_json() for j in self.jobs],
            "faults": [f.__dict__ for f in self.faults],
        }


def make_jobs(
    n: int,
    *,
    user: str = "alice",
    duration: float | Callable[[int], float] = 120.0,
    shared_input: str = "/data/ligo/frames",
    execute: bool = False,
    nodes: int = 16,
    bind_origin: bool = False,
) -> list[JobSpec]:
    """Synthetic LIGO-style jobs: shared frame input, private output directory."""
    jobs = []
    for i in range(n):
        jid = f"job-{i}"
        dur = duration(i) if callable(duration) else duration
        jobs.append(
            JobSpec(
                job_id=jid,
                input_scopes=(Permission("read", shared_input),),
                output_scopes=(Permission("write", f"/store/user/{user}/{jid}"),),
                execute_scopes=(Permission("read", shared_input),) if execute else (),
                duration=dur,
                execute_node=f"node-{i % nodes}",
                inputs=(f"{shared_input}/H-H1_frame-{i % 8}.gwf",),
                outputs=(f"/store/user/{user}/{jid}/result.txt",),
                bind_origin=bind_origin,
                user=user,
            )
        )
    return jobs


# -- transcript ---------------------------------------------------------------


@dataclass(frozen=True)
class Message:
    seq: int
    at: float
    edge: str
    kind: str
    job: str | None
    payload: str


class Transcript:
    def __init__(self) -> None:
        self.messages: list[Message] = []
        self._seq = itertools.count()

    def record(self, at: float, edge: str, kind: str, job: str | None, payload: Mapping[str, Any]) -> None:
        self.messages.append(Message(next(self._seq), at, edge, kind, job, json.dumps(payload, sort_keys=True)))

    def leaks(self, secrets_: Iterable[str], allowed_edges: Sequence[str] = (SUBMIT_ISSUER,)) -> list[Message]:
        """Messages outside ``allowed_edges`` whose payload contains any secret."""
        secrets_ = [s for s in secrets_ if s]
        return [
            m for m in self.messages
            if m.edge not in allowed_edges and any(s in m.payload for s in secrets_)
        ]

    def edge_counts(self) -> dict[str, int]:
        return dict(sorted(Counter(m.edge for m in self.messages).items()))


# -- transports ---------------------------------------------------------------


class _IssuerLink:
    """Submit-side view of the issuer; records traffic and injects outages."""

    def __init__(self, target: Any, run: _Simulation) -> None:
        self.target = target
        self.run = run
        self.mints = 0

    def grant_refresh(self, username: str, password: str, scopes: Any, audience: str) -> Any:
        now = self.run.clock.now()
        self.run.transcript.record(now, SUBMIT_ISSUER, "grant_request", None,
                                   {"username": username, "password": password,
                                    "scope": print_scope(coerce_scope(scopes)), "audience": audience})
        grant = self.target.grant_refresh(username, password, scopes, audience)
        self.run.handles.add(grant.refresh_token)
        self.run.transcript.record(now, SUBMIT_ISSUER, "grant_response", None, grant.to_json())
        return grant

    def mint_access(self, handle: str, scopes: Any = None, audience: Any = None, origin: Any = None) -> str:
        now = self.run.clock.now()
        job = self.run.current_job
        self.run.transcript.record(now, SUBMIT_ISSUER, "mint_request", job,
                                   {"refresh_token": handle, "scope": print_scope(coerce_scope(scopes)),
                                    "audience": audience, "origin": origin})
        if job is not None and self.run.in_outage(job, now):
            raise IssuerUnavailable(f"issuer unreachable for {job}")
        token = self.target.mint_access(handle, scopes, audience, origin)
        self.mints += 1
        self.run.transcript.record(now, SUBMIT_ISSUER, "mint_response", job, {"access_token": token})
        return token


# -- simulation ---------------------------------------------------------------


@dataclass
class _Job:
    spec: JobSpec
    status: str = "pending"
    phase: str | None = None
    started_at: float | None = None
    finished_at: float | None = None
    exec_end: float | None = None
    exec_remaining: float = 0.0
    version: int = 0
    fault_pending: list[Fault] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)
    manager_errors_seen: int = 0
    deliveries: Counter[str] = field(default_factory=Counter)
    holds: int = 0
    hold_retries: int = 0
    states: list[str] = field(default_factory=list)
    data_ops: int = 0
    authz_failures: int = 0
    local_reads: int = 0


class _Simulation:
    def __init__(self, run: WorkflowRun, workdir: Path) -> None:
        self.spec = run
        s = self.settings = run.settings
        self.clock: Clock = SimulatedClock() if s.clock == "simulated" else SystemClock()
        self.t0 = self.clock.now()
        self.rng = random.Random(s.seed)
        self.transcript = Transcript()
        self.handles: set[str] = set()
        self.current_job: str | None = None
        self.faults: dict[str, list[Fault]] = defaultdict(list)
        for f in run.faults:
            self.faults[f.job_id].append(f)
        self.workdir = workdir
        self._events: list[tuple[float, int, Callable[[], None]]] = []
        self._seq = itertools.count()
        self._servers: list[Any] = []
        self.violations: dict[str, list[str]] = defaultdict(list)
        self._build()

    # setup

    def _build(self) -> None:
        s = self.settings
        users = UserDirectory()
        for name, info in s.users.items():
            users.add_user(name, info["password"], info.get("groups", ()), iterations=1_000)
        self.issuer = TokenIssuer(
            s.issuer,
            [PolicyRule.from_json(r) for r in s.policy or []],
            users,
            clock=self.clock,
            access_lifetime=s.access_lifetime,
            rng=random.Random(self.rng.getrandbits(64)),
        )
        root = Path(s.document_root) if s.document_root else self.workdir / "root"
        root.mkdir(parents=True, exist_ok=True)
        self.root = root
        self._seed_inputs()

        if s.transport == "http":
            server = make_issuer_server(self.issuer)
            _http.serve_in_thread(server)
            self._servers.append(server)
            issuer_target: Any = IssuerClient(_http.server_url(server))
        else:
            issuer_target = self.issuer
        self.issuer_link = _IssuerLink(issuer_target, self)

        def fetch() -> KeySet:
            self.transcript.record(self.clock.now(), DATA_ISSUER, "jwks_fetch", None, {})
            return issuer_target.keyset()

        def introspect(token: str) -> Mapping[str, Any]:
            self.transcript.record(self.clock.now(), DATA_ISSUER, "introspect", None, {"token": token})
            return issuer_target.introspect(token)

        self.keys = KeyCache(fetch, clock=self.clock, interval=s.key_refetch_interval)
        self.keys.warm()
        self.warmup_fetches = self.keys.fetch_count
        self.periodic_refetches = 0
        self.gateways: dict[str, DataGateway] = {}
        self.gateway_urls: dict[str, str] = {}
        for name, audience in (("main", s.audience), ("other", s.other_audience)):
            config = GatewayConfig(
                document_root=root,
                issuer=s.issuer,
                audience=audience,
                mount_prefix=s.mount_prefix,
                key_refetch_interval=s.key_refetch_interval,
                enforce_origin=s.enforce_origin,
                skew=s.skew,
                introspection=s.introspection,
                audit_include_token=True,
            )
            gw = DataGateway(config, self.keys, clock=self.clock,
                             introspect=introspect if s.introspection else None)
            self.gateways[name] = gw
            if s.transport == "http":
                server = make_gateway_server(gw)
                _http.serve_in_thread(server)
                self._servers.append(server)
                self.gateway_urls[name] = _http.server_url(server)
        self.node_policy = {
            # execute nodes verify against the same distributed public keys
            "main": AccessPolicy.from_config(self.gateways["main"].config, self.keys.snapshot, clock=self.clock)
        }
        self.node_caches: dict[str, LocalCache] = defaultdict(LocalCache)

        self.vault = Vault(None, key=bytes(self.rng.getrandbits(8) for _ in range(32)))
        self.manager = TokenManager(
            self.vault, self.issuer_link, clock=self.clock, margin=s.margin, share_cache=s.share_cache
        )
        for name, info in s.users.items():
            submit_grant(
                self.issuer_link,
                self.vault,
                user=name,
                password=info["password"],
                scopes=s.grant_scopes.get(name, ""),
                audience=s.audience,
                issuer_url=s.issuer,
                now=self.clock.now(),
            )

    def _seed_inputs(self) -> None:
        for spec in self.spec.jobs:
            for path in spec.inputs:
                rel = reroot(path, self.settings.mount_prefix)
                if rel is None:
                    continue
                target = self.root.joinpath(*[p for p in rel.split("/") if p])
                if not target.exists():
                    target.parent.mkdir(parents=True, exist_ok=True)
                    target.write_bytes(f"frame data for {path}\n".encode())

    def close(self) -> None:
        for server in self._servers:
            server.shutdown()
            server.server_close()

    # event loop

    def at(self, when: float, action: Callable[[], None]) -> None:
        heapq.heappush(self._events, (when, next(self._seq), action))

    def _loop(self) -> None:
        while self._events and (self._active or self._queue):
            when, _, action = heapq.heappop(self._events)
            if isinstance(self.clock, SimulatedClock):
                if when > self.clock.now():
                    self.clock.set(when)
            else:
                self.clock.sleep(when - self.clock.now())
            action()

    def in_outage(self, job_id: str, now: float) -> bool:
        job = self.jobs.get(job_id)
        if job is None or job.started_at is None:
            return False
        for f in self.faults.get(job_id, ()):
            if f.type == "issuer-outage-window" and job.started_at + f.start <= now < job.started_at + f.end:
                return True
        return False

    # jobs

    def run(self) -> dict[str, Any]:
        self.jobs = {spec.job_id: _Job(spec) for spec in self.spec.jobs}
        for job in self.jobs.values():
            job.fault_pending = [f for f in self.faults.get(job.spec.job_id, ()) if f.type != "issuer-outage-window"]
        self._queue = list(self.jobs.values())
        self._active = 0
        now = self.clock.now()
        limit = self.settings.parallelism or len(self._queue)
        for _ in range(min(limit, len(self._queue))):
            self._start_next(now)
        if self.settings.key_refetch_interval > 0:
            self._schedule_refetch(now + self.settings.key_refetch_interval)
        self._loop()
        return self._report()

    def _schedule_refetch(self, when: float) -> None:
        def refetch() -> None:
            if self._active or self._queue:
                self.periodic_refetches += 1
                self.keys.refresh()
                self._schedule_refetch(self.clock.now() + self.settings.key_refetch_interval)
        self.at(when, refetch)

    def _start_next(self, now: float) -> None:
        if not self._queue:
            return
        job = self._queue.pop(0)
        self._active += 1
        self.at(now, lambda: self._begin(job))

    def _begin(self, job: _Job) -> None:
        job.status = "running"
        job.started_at = self.clock.now()
        job.states.append("running")
        if job.spec.input_scopes:
            self._acquire(job, "stage_in")
        else:
            self._enter_execute(job)

    def _request(self, job: _Job, phase: str) -> TokenRequest:
        spec = job.spec
        scopes = {"stage_in": spec.input_scopes, "execute": spec.execute_scopes, "stage_out": spec.output_scopes}[phase]
        return TokenRequest(
            job_id=spec.job_id,
            phase=phase,
            scopes=scopes,
            audience=self.settings.audience,
            origin=spec.execute_node if spec.bind_origin else None,
            user=spec.user,
        )

    def _with_job(self, job: _Job, fn: Callable[[], Any]) -> Any:
        self.current_job = job.spec.job_id
        try:
            return fn()
        finally:
            self.current_job = None

    def _acquire(self, job: _Job, phase: str) -> None:
        job.phase = phase
        job.manager_errors_seen = 0
        try:
            delivery = self._with_job(job, lambda: self.manager.start_job(self._request(job, phase)))
        except CaptokError as exc:
            self._fail(job, exc.code)
            return
        self._after_manager(job, [delivery] if delivery else [])

    def _after_manager(self, job: _Job, deliveries: list[Delivery]) -> None:
        mjob = self.manager.jobs[job.spec.job_id]
        job.errors.extend(mjob.errors[job.manager_errors_seen:])
        job.manager_errors_seen = len(mjob.errors)
        if deliveries:
            for d in deliveries:
                self._deliver(job, d)
            return
        if mjob.state == "hold":
            if job.phase == "execute" and job.exec_end is not None:
                job.exec_remaining = max(0.0, job.exec_end - self.clock.now())
                job.exec_end = None
            if job.states[-1] != "hold":
                job.holds += 1
                job.states.append("hold")
            else:
                job.hold_retries += 1
            job.version += 1
            version = job.version
            self.at(mjob.hold.next_retry, lambda: self._retry(job, version))
        elif mjob.state == "terminal_hold":
            self._fail(job, mjob.hold.cause if mjob.hold else "terminal_hold")

    def _retry(self, job: _Job, version: int) -> None:
        if version != job.version or job.status != "running":
            return
        deliveries = self._with_job(job, lambda: self.manager.retry_held(now=None, job_ids=[job.spec.job_id]))
        self._after_manager(job, deliveries)

    def _refresh(self, job: _Job, version: int) -> None:
        if version != job.version or job.status != "running":
            return
        deliveries = self._with_job(job, lambda: self.manager.refresh_running([job.spec.job_id]))
        self._after_manager(job, deliveries)

    def _deliver(self, job: _Job, d: Delivery) -> None:
        now = self.clock.now()
        spec = job.spec
        self.transcript.record(now, SUBMIT_EXECUTE, "token_delivery", spec.job_id,
                               {"phase": job.phase, "access_token": d.token, "node": spec.execute_node})
        job.deliveries[job.phase or "?"] += 1
        if job.states[-1] == "hold":
            job.states.append("running")
        self._check_delivered(job, d.token)
        if job.phase == "stage_in":
            self._stage_in(job, d.token)
        elif job.phase == "execute":
            self._execute_tick(job, d.token)
        elif job.phase == "stage_out":
            self._stage_out(job, d.token)

    def _check_delivered(self, job: _Job, token: str) -> None:
        _, claims = decode_unverified(token)
        want = self._request(job, job.phase or "execute")
        if sorted(claims.scope) != sorted(want.scopes):
            self.violations["attenuation"].append(f"{job.spec.job_id}:{job.phase}")
        if job.spec.bind_origin and claims.origin != job.spec.execute_node:
            self.violations["origin_binding"].append(job.spec.job_id)

    # phases

    def _stage_in(self, job: _Job, token: str) -> None:
        faults = job.fault_pending
        job.fault_pending = []
        expire = any(f.type == "expire-token" for f in faults)
        if expire:
            _, claims = decode_unverified(token)
            when = claims.exp + self.settings.skew + 1
            self.at(when, lambda: self._stage_in_reads(job, token, faults))
        else:
            self._stage_in_reads(job, token, faults)

    def _stage_in_reads(self, job: _Job, token: str, faults: list[Fault]) -> None:
        gateway = "main"
        paths = list(job.spec.inputs)
        for f in faults:
            if f.type == "tamper-token":
                token = tamper(token, self.rng)
            elif f.type == "wrong-audience":
                gateway = "other"
            elif f.type == "out-of-scope-path":
                paths.append(f"/forbidden/{job.spec.job_id}/secret.dat")
        for path in paths:
            status, body, code = self._data("GET", path, token, job, gateway)
            if status != 200:
                self._fail(job, code or f"http_{status}")
                return
            self.node_caches[job.spec.execute_node].put(path, body)
        self._enter_execute(job)

    def _enter_execute(self, job: _Job) -> None:
        job.phase = "execute"
        job.exec_remaining = job.spec.duration
        if job.spec.execute_scopes:
            self._acquire(job, "execute")
        else:
            job.exec_end = self.clock.now() + job.exec_remaining
            job.version += 1
            version = job.version
            self.at(job.exec_end, lambda: self._finish_execute(job, version))

    def _execute_tick(self, job: _Job, token: str) -> None:
        now = self.clock.now()
        if job.exec_end is None:
            job.exec_end = now + job.exec_remaining
        job.version += 1
        version = job.version
        readable = [p for p in job.spec.inputs if any(dominates(s, Permission.of("read", p)) for s in job.spec.execute_scopes)]
        if readable:
            path = readable[0]
            cache = self.node_caches[job.spec.execute_node]
            rel = reroot(path, self.settings.mount_prefix) or path
            if rel in cache:
                decision, _ = authorize_cached_read(token, rel, cache, self.node_policy["main"], job.spec.execute_node)
                job.local_reads += 1
                if not decision.allowed:
                    job.authz_failures += 1
                    job.errors.append(decision.code or "denied")
            else:
                status, body, code = self._data("GET", path, token, job, "main")
                if status == 200:
                    cache.put(rel, body)
        mjob = self.manager.jobs[job.spec.job_id]
        refresh_at = mjob.exp - self.settings.margin
        if refresh_at < job.exec_end:
            self.at(max(refresh_at, now), lambda: self._refresh(job, version))
        self.at(job.exec_end, lambda: self._finish_execute(job, version))

    def _finish_execute(self, job: _Job, version: int) -> None:
        if version != job.version or job.status != "running":
            return
        self.manager.finish_job(job.spec.job_id)
        if job.spec.output_scopes:
            self._acquire(job, "stage_out")
        else:
            self._complete(job)

    def _stage_out(self, job: _Job, token: str) -> None:
        for path in job.spec.outputs:
            payload = f"{job.spec.job_id} output\n".encode()
            status, _, code = self._data("PUT", path, token, job, "main", payload)
            if status not in (201, 204):
                self._fail(job, code or f"http_{status}")
                return
        self.manager.finish_job(job.spec.job_id)
        self._complete(job)

    def _complete(self, job: _Job) -> None:
        job.status = "succeeded"
        job.states.append("succeeded")
        self._done(job)

    def _fail(self, job: _Job, code: str) -> None:
        if code not in job.errors:
            job.errors.append(code)
        job.status = "failed"
        job.states.append("failed")
        self.manager.finish_job(job.spec.job_id)
        self._done(job)

    def _done(self, job: _Job) -> None:
        job.finished_at = self.clock.now()
        job.version += 1
        self._active -= 1
        self._start_next(self.clock.now())

    def _data(
        self, method: str, path: str, token: str, job: _Job, gateway: str, body: bytes | None = None
    ) -> tuple[int, bytes, str | None]:
        rel = reroot(path, self.settings.mount_prefix)
        if rel is None:
            return 400, b"", "outside_mount"
        node = job.spec.execute_node
        self.transcript.record(self.clock.now(), EXECUTE_DATA, f"{method} {gateway}", job.spec.job_id,
                               {"path": rel, "authorization": f"Bearer {token}", "client": node})
        job.data_ops += 1
        if self.settings.transport == "http":
            status, data = _http.request(
                method,
                self.gateway_urls[gateway] + rel,
                body=body if method == "PUT" else None,
                headers={"Authorization": f"Bearer {token}", "X-Client-Id": node},
            )
            code = None
            if status >= 400:
                try:
                    code = json.loads(data)["error"]
                except (ValueError, KeyError):
                    code = f"http_{status}"
            return status, data, code
        resp = self.gateways[gateway].handle_request(method, rel, f"Bearer {token}", node, body)
        return resp.status, resp.body, resp.error

    # report

    def _report(self) -> dict[str, Any]:
        jobs = []
        fault_map = {(f.job_id, f.code) for f in self.spec.faults}
        for job in self.jobs.values():
            jobs.append(
                {
                    "job_id": job.spec.job_id,
                    "status": job.status,
                    "errors": job.errors,
                    "deliveries": dict(sorted(job.deliveries.items())),
                    "holds": job.holds,
                    "hold_retries": job.hold_retries,
                    "states": job.states,
                    "data_ops": job.data_ops,
                    "local_reads": job.local_reads,
                    "authz_failures": job.authz_failures,
                    "started_at": round(job.started_at - self.t0, 6) if job.started_at is not None else None,
                    "finished_at": round(job.finished_at - self.t0, 6) if job.finished_at is not None else None,
                }
            )
        # mints per cache key, keyed by scope for keys shared by several jobs
        requesters: dict[tuple[str, ...], set[str]] = defaultdict(set)
        for job in self.jobs.values():
            for phase in ("stage_in", "execute", "stage_out"):
                try:
                    req = self._request(job, phase)
                except ValueError:
                    continue
                requesters[self.manager.cache_key(req)].add(job.spec.job_id)
        shared = {
            " | ".join(k): self.manager.mints[k]
            for k, who in sorted(requesters.items())
            if len(who) > 1 and self.manager.mints[k]
        }
        leaks = self.transcript.leaks(self.handles)
        gw_requests = sum(len(g.audit.records) for g in self.gateways.values())
        introspections = sum(g.introspections for g in self.gateways.values())
        steady_calls = introspections + self.keys.fetch_count - self.warmup_fetches - self.periodic_refetches
        per_request = round(steady_calls / gw_requests, 6) if gw_requests else 0.0
        mismatches = 0
        if not self.settings.introspection:
            for name, gw in self.gateways.items():
                policy = AccessPolicy.from_config(gw.config, self.issuer.keyset, clock=self.clock)
                mismatches += len(replay_audit(gw.audit.records, policy))
        expected_faults = []
        for f in self.spec.faults:
            hits = [j["job_id"] for j in jobs if f.code in j["errors"]]
            expected_faults.append({"job_id": f.job_id, "type": f.type, "code": f.code, "jobs_with_code": hits})
        unexpected_failures = [
            j["job_id"] for j in jobs
            if j["status"] != "succeeded" and not any((j["job_id"], e) in fault_map for e in j["errors"])
        ]
        summary = {
            "jobs": len(jobs),
            "succeeded": sum(j["status"] == "succeeded" for j in jobs),
            "failed": sum(j["status"] == "failed" for j in jobs),
            "issuer_mints": self.issuer_link.mints,
            "shared_scope_mints": shared,
            "token_deliveries": sum(sum(j["deliveries"].values()) for j in jobs),
            "refresh_deliveries": sum(max(0, j["deliveries"].get("execute", 0) - 1) for j in jobs),
            "holds": sum(j["holds"] for j in jobs),
            "gateway_requests": gw_requests,
            "gateway_steady_issuer_calls": steady_calls,
            "gateway_issuer_calls_per_request": per_request,
            "gateway_introspections": introspections,
            "gateway_key_refetches": self.periodic_refetches,
            "transcript_edges": self.transcript.edge_counts(),
            "sim_duration": round(self.clock.now() - self.t0, 6),
        }
        invariants = {
            "containment": {"ok": not leaks, "leaks": [f"{m.edge}:{m.kind}:{m.job}" for m in leaks]},
            "attenuation": {"ok": not self.violations["attenuation"], "violations": self.violations["attenuation"]},
            "origin_binding": {"ok": not self.violations["origin_binding"],
                               "violations": self.violations["origin_binding"]},
            "decentralization": {
                "ok": steady_calls == (gw_requests if self.settings.introspection else 0),
                "steady_issuer_calls": steady_calls,
                "requests": gw_requests,
                "issuer_calls_per_request": per_request,
            },
            "audit_replay": {"ok": mismatches == 0, "mismatches": mismatches,
                             "skipped": bool(self.settings.introspection)},
            "faults": {
                "ok": all(e["jobs_with_code"] == [e["job_id"]] for e in expected_faults) and not unexpected_failures,
                "expected": expected_faults,
                "unexpected_failures": unexpected_failures,
            },
        }
        return {"summary": summary, "invariants": invariants, "jobs": jobs}


def tamper(token: str, rng: random.Random | None = None) -> str:
    """Flip one character in the middle of the payload segment."""
    head, payload, sig = token.split(".")
    i = len(payload) // 2 if rng is None else rng.randrange(1, len(payload) - 1)
    alphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-_"
    swap = alphabet[(alphabet.index(payload[i]) + 1) % len(alphabet)]
    return f"{head}.{payload[:i]}{swap}{payload[i + 1:]}.{sig}"


@dataclass
class RunResult:
    report: dict[str, Any]
    transcript: Transcript
    handles: set[str]
    issuer: TokenIssuer
    manager: TokenManager
    gateways: dict[str, DataGateway]

    def dumps(self) -> str:
        return json.dumps(self.report, sort_keys=True, indent=2)


def run_workflow(run: WorkflowRun, workdir: str | Path | None = None) -> RunResult:
    """Execute every job of ``run`` and return the report plus run artefacts."""
    tmp = None
    if workdir is None:
        tmp = tempfile.TemporaryDirectory(prefix="captok-run-")
        workdir = tmp.name
    sim = _Simulation(run, Path(workdir))
    try:
        report = sim.run()
    finally:
        sim.close()
        if tmp is not None:
            tmp.cleanup()
    return RunResult(report, sim.transcript, sim.handles, sim.issuer, sim.manager, sim.gateways)
