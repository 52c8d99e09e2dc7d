# Service wiring and the HTTP surface
#
# build_service boots the emulated platform and every subsystem in order;
# make_app exposes them as an aiohttp application. Binary fields travel as hex.

import asyncio
import functools
import json
import logging
import os
from pathlib import Path
from typing import Callable, Dict, Optional

import aiofiles
import attr
from aiohttp import web

from . import cfg
from .audit import (
    AuditEntry,
    AuditError,
    AuditLog,
    EventKind,
    filter_entries,
)
from .crypto import (
    KEY_SIZE,
    CryptoError,
    Digest,
    EnvelopeCiphertext,
    KeyKind,
    Signature,
    digest,
    keypair_from_secret,
)
from .drift_watch import DriftWatch
from .enclave import (
    AttestationReport,
    BoundaryViolation,
    EnclaveError,
    EnclaveIdentity,
    Platform,
)
from .governance import (
    AlreadyExecuted,
    Approval,
    DuplicateApproval,
    ExecutedProposal,
    Governance,
    GovernanceError,
    GovernancePolicy,
    InsufficientApprovals,
    InvalidApproval,
    Operation,
    ProposalNotFound,
    TokenRejected,
    UnknownRepresentative,
    load_policy,
)
from .rag import (
    AuthFailure,
    DecryptFailure,
    ExtractiveGenerator,
    Generator,
    PipelineError,
    RagPipeline,
    load_clients,
)
from .redaction import (
    RedactionError,
    Redactor,
    compile_rules,
    default_redactor,
    load_rules,
)
from .registry import ArtifactRegistry, RegistryError
from .utils import (
    create_tables,
    make_session_factory,
    operation_timer,
    run_in_thread_pool,
)
from .vector_store import (
    DuplicateRecord,
    EncryptedVectorStore,
    StaleUpdate,
    StoreError,
    Unauthorized,
    UnknownRecord,
)

logger = logging.getLogger(__name__)

PACKAGE_DIR = Path(__file__).resolve().parent


@attr.s(auto_exc=True)
class StartupError(Exception):
    subsystem: str = attr.ib()
    reason: str = attr.ib()

    def __str__(self) -> str:
        return "{} failed to start: {}".format(self.subsystem, self.reason)


def code_identity(package_dir: Path = PACKAGE_DIR) -> bytes:
    """Digest over every module source of the package, in path order"""
    parts = []
    for path in sorted(package_dir.rglob("*.py")):
        relative = path.relative_to(package_dir).as_posix().encode("utf-8")
        parts.append(digest(relative + b"\0" + path.read_bytes()).value)
    return digest(b"".join(parts)).value


def _read_or_create_secret(path: str) -> bytes:
    secret_path = Path(path)
    if secret_path.exists():
        secret = bytes.fromhex(secret_path.read_text(encoding="ascii").strip())
        if len(secret) != KEY_SIZE:
            raise ValueError("{} must hold {} bytes of hex".format(path, KEY_SIZE))
        return secret
    secret_path.parent.mkdir(parents=True, exist_ok=True)
    secret = os.urandom(KEY_SIZE)
    fd = os.open(secret_path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o600)
    with os.fdopen(fd, "w", encoding="ascii") as fh:
        fh.write(secret.hex() + "\n")
    logger.warning("Created new secret at {}".format(path))
    return secret


def load_platform(config: cfg.ServerConfig) -> Platform:
    if config.root_secret_path is None:
        raise StartupError("platform", "a platform root secret file is required")
    root_keys = keypair_from_secret(
        KeyKind.SIGNING, _read_or_create_secret(config.root_secret_path)
    )
    if config.root_public and root_keys.public_key.hex() != config.root_public.lower():
        raise StartupError("platform", "root secret does not match root_public")
    return Platform(root_keys, _read_or_create_secret(config.device_secret_path))


@attr.s(eq=False)
class Service:
    config: cfg.ServerConfig = attr.ib()
    platform: Platform = attr.ib()
    enclave: EnclaveIdentity = attr.ib()
    audit: AuditLog = attr.ib()
    governance: Governance = attr.ib()
    store: EncryptedVectorStore = attr.ib()
    pipeline: RagPipeline = attr.ib()
    registry: ArtifactRegistry = attr.ib()
    pk_attestation: AttestationReport = attr.ib()
    drift_watch: Optional[DriftWatch] = attr.ib(default=None)

    @property
    def root_public(self) -> bytes:
        return self.platform.root_public

    def attest(self, report_data: Digest) -> AttestationReport:
        return self.platform.attest(self.enclave, report_data)

    def self_report(self) -> AttestationReport:
        return self.attest(digest(self.enclave.pk_tee))

    def close(self) -> None:
        if self.drift_watch is not None:
            self.drift_watch.shutdown()
        self.store.close()
        self.audit.close()


@functools.lru_cache(maxsize=1)
def _default_code_identity() -> bytes:
    return code_identity()


def _step(subsystem: str, func: Callable, *args, **kwargs):
    try:
        return func(*args, **kwargs)
    except StartupError:
        raise
    except (
        OSError,
        ValueError,
        CryptoError,
        EnclaveError,
        AuditError,
        StoreError,
        GovernanceError,
        PipelineError,
        RedactionError,
        RegistryError,
    ) as e:
        raise StartupError(subsystem, str(e)) from e


def _ensure_sqlite_dir(db_url: str) -> None:
    prefix = "sqlite:///"
    if db_url.startswith(prefix) and ":memory:" not in db_url:
        Path(db_url[len(prefix) :]).parent.mkdir(parents=True, exist_ok=True)


def build_service(
    config: cfg.ServerConfig,
    platform: Optional[Platform] = None,
    code_id: Optional[bytes] = None,
    generator: Optional[Generator] = None,
) -> Service:
    generator = generator or ExtractiveGenerator()
    with operation_timer("Service startup", logger):
        platform = platform or load_platform(config)
        enclave = _step(
            "enclave",
            platform.boot,
            code_id or _default_code_identity(),
            config.measured_bytes(generator.generator_id),
        )
        for path in (config.audit_path, config.store_path, config.registry_path):
            _step("filesystem", Path(path).parent.mkdir, parents=True, exist_ok=True)
        audit = _step("audit", AuditLog, config.audit_path, enclave)
        _step(
            "audit",
            audit.append_event,
            EventKind.BOOT,
            "enclave",
            [enclave.measurement],
        )

        policy = _step("governance", load_policy, config.policy_path)
        _ensure_sqlite_dir(config.db_url)
        sessions = _step("governance", make_session_factory, config.db_url)
        _step("governance", create_tables, sessions)
        governance = Governance(policy, sessions, enclave, audit)

        store = _step(
            "store",
            EncryptedVectorStore,
            config.store_path,
            enclave,
            audit,
            config.dim,
            governance,
        )
        redactor: Redactor = (
            _step("rules", lambda: compile_rules(load_rules(config.rules_path)))
            if config.rules_path
            else default_redactor()
        )
        clients = _step("clients", load_clients, config.clients_path)
        pipeline = _step(
            "pipeline",
            RagPipeline,
            enclave,
            store,
            audit,
            clients,
            functools.partial(platform.attest, enclave),
            redactor,
            k=config.k,
            provenance=config.provenance,
            generator=generator,
        )
        registry = _step("registry", ArtifactRegistry, config.registry_path, audit)
        pk_attestation = platform.attest(enclave, digest(enclave.pk_tee))

        service = Service(
            config=config,
            platform=platform,
            enclave=enclave,
            audit=audit,
            governance=governance,
            store=store,
            pipeline=pipeline,
            registry=registry,
            pk_attestation=pk_attestation,
        )
        if config.drift_interval_minutes > 0 and config.artifact_version:
            service.drift_watch = DriftWatch(
                registry,
                config.artifact_name,
                config.artifact_version,
                service.self_report,
                platform.root_public,
                config.drift_interval_minutes,
            )
    logger.info(
        "Enclave {} serving pk_TEE {}".format(
            enclave.measurement.hex(), enclave.pk_tee.hex()
        )
    )
    return service


class BadRequest(Exception):
    pass


_STATUS = (
    (AuthFailure, 401),
    (DecryptFailure, 401),
    (BoundaryViolation, 500),
    (ProposalNotFound, 404),
    (UnknownRecord, 404),
    (DuplicateRecord, 409),
    (StaleUpdate, 409),
    (DuplicateApproval, 409),
    (AlreadyExecuted, 409),
    (TokenRejected, 403),
    (InsufficientApprovals, 403),
    (InvalidApproval, 403),
    (UnknownRepresentative, 403),
    (Unauthorized, 403),
    (GovernanceError, 400),
    (StoreError, 400),
    (RegistryError, 400),
    (RedactionError, 400),
    (CryptoError, 400),
    (EnclaveError, 400),
    (PipelineError, 400),
    (BadRequest, 400),
)


def status_for(error: Exception) -> int:
    for error_type, status in _STATUS:
        if isinstance(error, error_type):
            return status
    return 500


@web.middleware
async def error_middleware(request: web.Request, handler) -> web.StreamResponse:
    try:
        return await handler(request)
    except web.HTTPException:
        raise
    except asyncio.CancelledError:
        raise
    except Exception as e:
        status = status_for(e)
        if status == 500:
            logger.exception("Unhandled error on {}".format(request.path))
            message = "internal error"
        else:
            logger.info(
                "{} {} -> {} {}".format(
                    request.method, request.path, status, type(e).__name__
                )
            )
            message = str(e)
        return web.json_response(
            {"error": type(e).__name__, "message": message}, status=status
        )


async def _json_body(request: web.Request) -> dict:
    try:
        body = await request.json()
    except (ValueError, UnicodeDecodeError) as e:
        raise BadRequest("Body must be JSON") from e
    if not isinstance(body, dict):
        raise BadRequest("Body must be a JSON object")
    return body


def _field(body: dict, name: str, kind=str):
    value = body.get(name)
    if not isinstance(value, kind):
        raise BadRequest("Field {} is required".format(name))
    return value


def _envelope(body: dict) -> EnvelopeCiphertext:
    return EnvelopeCiphertext.from_hex(_field(body, "envelope"))


def _service(request: web.Request) -> Service:
    return request.app["service"]


async def get_attestation(request: web.Request) -> web.Response:
    service = _service(request)
    report = service.pk_attestation
    return web.json_response(
        {
            "report": report.hex(),
            "measurement": service.enclave.measurement.hex(),
            "pk_tee": service.enclave.pk_tee.hex(),
            "enclave_signing_public": service.enclave.signing_public.hex(),
            "root_public": service.root_public.hex(),
        }
    )


async def get_pk(request: web.Request) -> web.Response:
    service = _service(request)
    return web.json_response(
        {"pk_tee": service.enclave.pk_tee.hex(), "report": service.pk_attestation.hex()}
    )


async def post_query(request: web.Request) -> web.Response:
    service = _service(request)
    envelope = _envelope(await _json_body(request))
    inflight: Dict[asyncio.Task, Digest] = request.app["inflight"]
    task = asyncio.current_task()
    inflight[task] = digest(envelope.to_bytes())
    try:
        response = await run_in_thread_pool(service.pipeline.handle_query, envelope)
    finally:
        inflight.pop(task, None)
    return web.json_response(response.to_dict())


async def post_record(request: web.Request) -> web.Response:
    service = _service(request)
    envelope = _envelope(await _json_body(request))
    record_id = await run_in_thread_pool(service.pipeline.handle_contribution, envelope)
    created_seq = service.store.live_seq(record_id)
    return web.json_response(
        {"record_id": record_id, "created_seq": created_seq}, status=201
    )


async def post_record_update(request: web.Request) -> web.Response:
    service = _service(request)
    record_id = request.match_info["record_id"]
    envelope = _envelope(await _json_body(request))
    created_seq = await run_in_thread_pool(
        service.pipeline.handle_update, record_id, envelope
    )
    return web.json_response({"record_id": record_id, "created_seq": created_seq})


async def post_propose(request: web.Request) -> web.Response:
    service = _service(request)
    body = await _json_body(request)
    operation = _field(body, "operation")
    params = _field(body, "params", dict)
    rep_id = _field(body, "rep_id")
    signature = Signature.from_hex(_field(body, "signature"))
    service.governance.verify_proposer(rep_id, signature, operation, params)
    proposal = await run_in_thread_pool(
        service.governance.propose, operation, params, proposer=rep_id
    )
    return web.json_response({"proposal": json.loads(proposal.to_json())}, status=201)


async def post_approve(request: web.Request) -> web.Response:
    service = _service(request)
    body = await _json_body(request)
    approval = Approval.from_json(json.dumps(_field(body, "approval", dict)))
    await run_in_thread_pool(service.governance.record_approval, approval)
    count = len(service.governance.approvals_for(approval.proposal_id))
    return web.json_response(
        {
            "proposal_id": approval.proposal_id,
            "rep_id": approval.rep_id,
            "approvals": count,
            "threshold": service.governance.policy.threshold,
        }
    )


def apply_executed(
    service: Service, token: ExecutedProposal, params: dict, body: dict
) -> dict:
    """Carry out an executed proposal; the token is redeemed by the callee"""
    if token.operation is Operation.DELETE_RECORD:
        receipt = service.store.delete_record(params["record_id"], token)
        return {
            "record_id": receipt.record_id,
            "versions_zeroed": receipt.versions_zeroed,
        }
    if token.operation is Operation.EXTRACT_RECORD:
        envelope = service.store.extract_record(
            params["record_id"], bytes.fromhex(params["recipient"]), token
        )
        return {"record_id": params["record_id"], "envelope": envelope.hex()}
    if token.operation is Operation.CHANGE_RULES:
        redactor = service.pipeline.change_rules(
            service.governance, token, params["rules"]
        )
        return {"rules": len(redactor.rules), "rules_digest": redactor.digest().hex()}
    if token.operation is Operation.ROTATE_POLICY:
        policy = GovernancePolicy.from_json(params["policy"])
        service.governance.rotate_policy(token, policy)
        return {
            "threshold": policy.threshold,
            "representatives": [rep.rep_id for rep in policy.representatives],
        }
    if token.operation is Operation.UPDATE_RECORD:
        created_seq = service.pipeline.handle_governed_update(
            params["record_id"], _envelope(body), token
        )
        return {"record_id": params["record_id"], "created_seq": created_seq}
    raise BadRequest("Operation {} cannot be applied".format(token.operation.value))


async def post_execute(request: web.Request) -> web.Response:
    service = _service(request)
    body = await _json_body(request)
    proposal_id = _field(body, "proposal_id")
    approvals = [
        Approval.from_json(json.dumps(entry)) for entry in body.get("approvals") or []
    ]
    proposal = service.governance.get(proposal_id)
    if proposal.operation is Operation.UPDATE_RECORD:
        # Checked before executing so a missing envelope cannot burn the proposal
        _envelope(body)
    token = await run_in_thread_pool(service.governance.execute, proposal_id, approvals)
    result = await run_in_thread_pool(
        apply_executed, service, token, proposal.params, body
    )
    return web.json_response({"executed": token.to_dict(), "result": result})


def _optional_int(query, name: str) -> Optional[int]:
    if name not in query:
        return None
    try:
        return int(query[name])
    except ValueError as e:
        raise BadRequest("{} must be an integer".format(name)) from e


async def read_audit_file(path: str) -> list:
    entries = []
    async with aiofiles.open(path, mode="r", encoding="utf-8") as fh:
        async for line in fh:
            if line.strip():
                entries.append(AuditEntry.from_json(line))
    return entries


async def get_audit(request: web.Request) -> web.Response:
    service = _service(request)
    query = request.query
    try:
        kind = EventKind(query["kind"]) if "kind" in query else None
        subject = Digest.from_hex(query["subject"]) if "subject" in query else None
    except (ValueError, CryptoError) as e:
        raise BadRequest(str(e)) from e
    start, stop = _optional_int(query, "start"), _optional_int(query, "stop")
    seq_range = None
    if start is not None or stop is not None:
        seq_range = (start or 0, stop if stop is not None else 2 ** 63)
    entries = await read_audit_file(service.config.audit_path)
    selected = filter_entries(entries, kind, query.get("actor"), subject, seq_range)
    return web.json_response(
        {
            "enclave_signing_public": service.enclave.signing_public.hex(),
            "entries": [entry.to_dict() for entry in selected],
        }
    )


async def get_registry_check(request: web.Request) -> web.Response:
    service = _service(request)
    name = request.query.get("name", service.config.artifact_name)
    version = request.query.get("version", service.config.artifact_version)
    if not version:
        raise BadRequest("version is required")
    report = service.self_report()
    verdict = await run_in_thread_pool(
        service.registry.check_deployment, name, version, report, service.root_public
    )
    return web.json_response(
        {
            "name": name,
            "version": version,
            "status": verdict.status.value,
            "expected": verdict.expected.hex() if verdict.expected else None,
            "observed": verdict.observed.hex(),
            "report_verified": verdict.report_verified,
            "report": report.hex(),
        }
    )


async def _on_startup(app: web.Application) -> None:
    service: Service = app["service"]
    if service.drift_watch is not None:
        service.drift_watch.start()


async def _on_shutdown(app: web.Application) -> None:
    service: Service = app["service"]
    inflight: Dict[asyncio.Task, Digest] = app["inflight"]
    if inflight:
        logger.info("Waiting for {} in-flight queries".format(len(inflight)))
        _, pending = await asyncio.wait(
            list(inflight), timeout=service.config.shutdown_timeout
        )
        for task in pending:
            envelope_digest = inflight.pop(task, None)
            if envelope_digest is not None:
                service.audit.append_event(
                    EventKind.QUERY_ABORTED, "gateway", [envelope_digest]
                )
            task.cancel()
        if pending:
            logger.warning("Aborted {} in-flight queries".format(len(pending)))


async def _on_cleanup(app: web.Application) -> None:
    app["service"].close()
    logger.info("Service closed")


def make_app(service: Service) -> web.Application:
    app = web.Application(middlewares=[error_middleware])
    app["service"] = service
    app["inflight"] = {}
    app.add_routes(
        [
            web.get("/v1/attestation", get_attestation),
            web.get("/v1/pk", get_pk),
            web.post("/v1/query", post_query),
            web.post("/v1/records", post_record),
            web.post("/v1/records/{record_id}/update", post_record_update),
            web.post("/v1/admin/propose", post_propose),
            web.post("/v1/admin/approve", post_approve),
            web.post("/v1/admin/execute", post_execute),
            web.get("/v1/audit", get_audit),
            web.get("/v1/registry/check", get_registry_check),
        ]
    )
    app.on_startup.append(_on_startup)
    app.on_shutdown.append(_on_shutdown)
    app.on_cleanup.append(_on_cleanup)
    return app


async def serve(config: cfg.ServerConfig, stop: Optional[asyncio.Event] = None) -> None:
    """Run until `stop` is set; startup failures raise StartupError"""
    service = await run_in_thread_pool(build_service, config)
    runner = web.AppRunner(make_app(service))
    await runner.setup()
    site = web.TCPSite(runner, config.host, config.port)
    try:
        await site.start()
    except OSError as e:
        await runner.cleanup()
        raise StartupError("http", str(e)) from e
    logger.info("Listening on {}:{}".format(config.host, config.port))
    stop = stop or asyncio.Event()
    try:
        await stop.wait()
    finally:
        await runner.cleanup()
