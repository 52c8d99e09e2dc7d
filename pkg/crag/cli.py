"""Operator and client command line for crag

Exit codes: 0 ok, 1 usage or transport error, 2 verification failure,
3 governance refusal, 4 startup error.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from . import cfg
from .audit import AuditError, verify_file
from .client import (
    AttestationFailure,
    ClientError,
    CragClient,
    ServerError,
    build_governed_update,
    expected_measurement,
    open_extract,
)
from .crypto import (
    CryptoError,
    EnvelopeCiphertext,
    KeyKind,
    digest,
    generate_keypair,
    keypair_from_secret,
    sign,
)
from .enclave import AttestationReport, EnclaveError, Measurement
from .gateway import StartupError, code_identity
from .governance import (
    AdminProposal,
    Approval,
    GovernanceError,
    GovernancePolicy,
    Operation,
    parse_operation,
)
from .rag import ExtractiveGenerator
from .records import Visibility
from .registry import ArtifactRegistry, DriftStatus, RegistryError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFICATION = 2
EXIT_GOVERNANCE = 3
EXIT_STARTUP = 4


class UsageError(Exception):
    pass


class VerificationFailed(Exception):
    pass


def _read_hex_file(path: str) -> bytes:
    try:
        return bytes.fromhex(Path(path).read_text(encoding="ascii").strip())
    except (OSError, ValueError) as e:
        raise UsageError("Cannot read hex from {}: {}".format(path, e)) from e


def _load_keys(path: str, kind: KeyKind):
    try:
        return keypair_from_secret(kind, _read_hex_file(path))
    except CryptoError as e:
        raise UsageError("{} is not a {} key: {}".format(path, kind.value, e)) from e


def _emit(data) -> None:
    print(json.dumps(data, indent=2, sort_keys=True))


def _client(args, with_identity: bool = False) -> CragClient:
    if not args.root_public or not args.measurement:
        raise UsageError("--root-public and --measurement are required")
    try:
        root_public = bytes.fromhex(args.root_public)
        measurement = expected_measurement(args.measurement)
    except (ValueError, CryptoError) as e:
        raise UsageError(str(e)) from e
    client_id, signing_keys = None, None
    if with_identity:
        if not args.client_id or not args.key:
            raise UsageError("--client-id and --key are required")
        client_id = args.client_id
        signing_keys = _load_keys(args.key, KeyKind.SIGNING)
    return CragClient(args.url, root_public, measurement, client_id, signing_keys)


def cmd_keygen(args) -> int:
    keys = generate_keypair(KeyKind(args.kind))
    secret_path = Path(args.out + ".secret")
    public_path = Path(args.out + ".pub")
    if secret_path.exists() and not args.force:
        raise UsageError("{} exists; pass --force to overwrite".format(secret_path))
    secret_path.parent.mkdir(parents=True, exist_ok=True)
    fd = os.open(secret_path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "w", encoding="ascii") as fh:
        fh.write(keys.export_secret().hex() + "\n")
    public_path.write_text(keys.public_key.hex() + "\n", encoding="ascii")
    _emit(
        {
            "kind": args.kind,
            "public": keys.public_key.hex(),
            "secret_file": str(secret_path),
        }
    )
    return EXIT_OK


def cmd_attest(args) -> int:
    identity = _client(args).verify_server()
    _emit(
        {
            "measurement": identity.report.measurement.hex(),
            "pk_tee": identity.pk_tee.hex(),
            "enclave_signing_public": identity.enclave_signing_public.hex(),
            "report": identity.report.hex(),
            "verified": True,
        }
    )
    return EXIT_OK


def cmd_export_pk(args) -> int:
    identity = _client(args).verify_server()
    if args.out:
        Path(args.out).write_text(identity.pk_tee.hex() + "\n", encoding="ascii")
    print(identity.pk_tee.hex())
    return EXIT_OK


def _records_from(path: str) -> List[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
                records.append(
                    {
                        "record_id": entry["record_id"],
                        "text": entry["text"],
                        "visibility": Visibility(entry.get("visibility", "private")),
                    }
                )
            except (KeyError, TypeError, ValueError) as e:
                raise UsageError("{}:{}: {}".format(path, lineno, e)) from e
    return records


def cmd_ingest(args) -> int:
    client = _client(args, with_identity=True)
    if args.records:
        records = _records_from(args.records)
    elif args.record_id and args.text is not None:
        records = [
            {
                "record_id": args.record_id,
                "text": args.text,
                "visibility": Visibility(args.visibility),
            }
        ]
    else:
        raise UsageError("Pass a JSON lines file or --record-id with --text")
    ingested = [
        client.contribute(r["record_id"], r["text"], r["visibility"]) for r in records
    ]
    _emit(
        {
            "ingested": ingested,
            "created_seq": {rid: client.seq_of(rid) for rid in ingested},
        }
    )
    return EXIT_OK


def cmd_update(args) -> int:
    client = _client(args, with_identity=True)
    created_seq = client.update(args.record_id, args.text, args.expected_seq)
    _emit({"record_id": args.record_id, "created_seq": created_seq})
    return EXIT_OK


def cmd_query(args) -> int:
    client = _client(args, with_identity=True)
    answer = client.query(args.prompt, args.context)
    _emit(
        {
            "text": answer.text,
            "provenance": answer.provenance,
            "retrieved": answer.retrieved,
            "generator_id": answer.generator_id,
            "measurement": answer.attestation.measurement.hex(),
        }
    )
    return EXIT_OK


def cmd_audit_verify(args) -> int:
    try:
        public = bytes.fromhex(args.enclave_public)
    except ValueError as e:
        raise UsageError("--enclave-public must be hex") from e
    verdict = verify_file(args.log, public)
    _emit(
        {
            "valid": verdict.valid,
            "first_bad_seq": verdict.first_bad_seq,
            "reason": verdict.reason.value if verdict.reason else None,
        }
    )
    if not verdict:
        raise VerificationFailed(
            "Audit chain broken at entry {}".format(verdict.first_bad_seq)
        )
    return EXIT_OK


def cmd_registry_register(args) -> int:
    registry = ArtifactRegistry(args.registry)
    try:
        measurement = Measurement(bytes.fromhex(args.measurement))
    except (ValueError, CryptoError) as e:
        raise UsageError("--measurement must be 32 bytes of hex") from e
    record = registry.register(args.name, args.version, measurement)
    _emit(record.to_dict())
    return EXIT_OK


CHECK_WORDS = {
    DriftStatus.MATCH: "match",
    DriftStatus.DRIFT: "drift",
    DriftStatus.UNKNOWN_ARTIFACT: "unknown",
}


def cmd_registry_check(args) -> int:
    registry = ArtifactRegistry(args.registry)
    if args.report:
        report = AttestationReport.from_hex(args.report)
    else:
        if not args.url:
            raise UsageError("Pass --report or --url")
        report, _ = CragClient(args.url).fetch_report()
    try:
        root_public = bytes.fromhex(args.root_public)
    except (TypeError, ValueError) as e:
        raise UsageError("--root-public must be hex") from e
    verdict = registry.check_deployment(args.name, args.version, report, root_public)
    print(CHECK_WORDS[verdict.status])
    logger.info(
        "expected {} observed {} report verified {}".format(
            verdict.expected.hex() if verdict.expected else None,
            verdict.observed.hex(),
            verdict.report_verified,
        )
    )
    if not verdict.ok:
        raise VerificationFailed(
            "{} {} is {}".format(args.name, args.version, verdict.status.value)
        )
    return EXIT_OK


def _parse_params(pairs: Sequence[str]) -> dict:
    params = {}
    for pair in pairs or ():
        name, sep, value = pair.partition("=")
        if not sep:
            raise UsageError("Parameter {!r} is not name=value".format(pair))
        params[name] = value
    return params


def cmd_govern_propose(args) -> int:
    operation = parse_operation(args.operation)
    params = _parse_params(args.param)
    if args.text_file:
        text = Path(args.text_file).read_text(encoding="utf-8")
        if operation is Operation.UPDATE_RECORD:
            params["text_digest"] = digest(text.encode("utf-8")).hex()
        elif operation is Operation.CHANGE_RULES:
            params["rules"] = text
        elif operation is Operation.ROTATE_POLICY:
            params["policy"] = GovernancePolicy.from_json(text).to_json()
        else:
            raise UsageError("--text-file does not apply to {}".format(operation.value))
    client = _client(args)
    proposal = client.propose(
        args.rep_id, _load_keys(args.key, KeyKind.SIGNING), operation, params
    )
    if args.out:
        Path(args.out).write_text(proposal.to_json() + "\n", encoding="utf-8")
    _emit(json.loads(proposal.to_json()))
    return EXIT_OK


def cmd_govern_approve(args) -> int:
    proposal = AdminProposal.from_json(Path(args.proposal).read_text(encoding="utf-8"))
    keys = _load_keys(args.key, KeyKind.SIGNING)
    approval = Approval(
        proposal.proposal_id, args.rep_id, sign(keys, proposal.approval_message())
    )
    if args.out:
        Path(args.out).write_text(approval.to_json() + "\n", encoding="utf-8")
    if args.submit:
        _emit(_client(args).approve(approval))
    else:
        _emit(json.loads(approval.to_json()))
    return EXIT_OK


def cmd_govern_execute(args) -> int:
    client = _client(args)
    approvals = [
        Approval.from_json(Path(path).read_text(encoding="utf-8"))
        for path in args.approval or ()
    ]
    envelope: Optional[EnvelopeCiphertext] = None
    if args.text_file:
        text = Path(args.text_file).read_text(encoding="utf-8")
        _, envelope = build_governed_update(client.identity.pk_tee, text)
    data = client.execute(args.proposal_id, approvals, envelope)
    result = data["result"]
    if args.recipient_key and "envelope" in result:
        keys = _load_keys(args.recipient_key, KeyKind.AGREEMENT)
        extracted = EnvelopeCiphertext.from_hex(result["envelope"])
        result = dict(result, text=open_extract(keys, extracted))
    _emit({"executed": data["executed"].to_dict(), "result": result})
    return EXIT_OK


def cmd_measure(args) -> int:
    config = cfg.load_config(args.config)
    generator = ExtractiveGenerator()
    measurement = Measurement.of(
        code_identity(), config.measured_bytes(generator.generator_id)
    )
    print(measurement.hex())
    return EXIT_OK


def cmd_serve(args) -> int:
    from . import main

    main.run(cfg.load_config(args.config))
    return EXIT_OK


def _add_server_args(parser: argparse.ArgumentParser, identity: bool = False) -> None:
    parser.add_argument("--url", default=os.getenv("CRAG_URL", "http://127.0.0.1:8400"))
    parser.add_argument("--root-public", default=os.getenv("CRAG_ROOT_PUBLIC"))
    parser.add_argument(
        "--measurement",
        default=os.getenv("CRAG_MEASUREMENT"),
        help="Expected enclave measurement (hex)",
    )
    if identity:
        parser.add_argument("--client-id", default=os.getenv("CRAG_CLIENT_ID"))
        parser.add_argument(
            "--key", default=os.getenv("CRAG_CLIENT_KEY"), help="Signing secret file"
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crag", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default=cfg.log_level)
    commands = parser.add_subparsers(dest="command", required=True)

    keygen = commands.add_parser("keygen", help="Write a hex keypair")
    keygen.add_argument(
        "--kind", choices=[kind.value for kind in KeyKind], default="signing"
    )
    keygen.add_argument("--out", required=True, help="Path prefix for .secret and .pub")
    keygen.add_argument("--force", action="store_true")
    keygen.set_defaults(func=cmd_keygen)

    attest = commands.add_parser("attest", help="Verify the server attestation")
    _add_server_args(attest)
    attest.set_defaults(func=cmd_attest)

    export_pk = commands.add_parser("export-pk", help="Print the verified pk_TEE")
    _add_server_args(export_pk)
    export_pk.add_argument("--out")
    export_pk.set_defaults(func=cmd_export_pk)

    ingest = commands.add_parser("ingest", help="Contribute records")
    _add_server_args(ingest, identity=True)
    ingest.add_argument(
        "records", nargs="?", help="JSON lines of record_id, text, visibility"
    )
    ingest.add_argument("--record-id")
    ingest.add_argument("--text")
    ingest.add_argument(
        "--visibility", choices=[v.value for v in Visibility], default="private"
    )
    ingest.set_defaults(func=cmd_ingest)

    update = commands.add_parser("update", help="Replace the text of an own record")
    _add_server_args(update, identity=True)
    update.add_argument("record_id")
    update.add_argument("text")
    update.add_argument(
        "--expected-seq",
        type=int,
        required=True,
        help="created_seq of the version being replaced",
    )
    update.set_defaults(func=cmd_update)

    query = commands.add_parser("query", help="Ask an attested question")
    _add_server_args(query, identity=True)
    query.add_argument("prompt")
    query.add_argument("--context", help="Private context sent with the prompt")
    query.set_defaults(func=cmd_query)

    audit_verify = commands.add_parser("audit-verify", help="Verify an audit log file")
    audit_verify.add_argument("log")
    audit_verify.add_argument("--enclave-public", required=True)
    audit_verify.set_defaults(func=cmd_audit_verify)

    registry = commands.add_parser("registry", help="Artifact registry")
    registry_commands = registry.add_subparsers(dest="registry_command", required=True)
    register = registry_commands.add_parser("register")
    register.add_argument("--registry", default=cfg.defaults.registry_path)
    register.add_argument("--name", default=cfg.defaults.artifact_name)
    register.add_argument("--version", required=True)
    register.add_argument("--measurement", required=True)
    register.set_defaults(func=cmd_registry_register)
    check = registry_commands.add_parser(
        "check", help="Print match, drift or unknown for a deployment"
    )
    check.add_argument("name")
    check.add_argument("version")
    check.add_argument("--registry", default=cfg.defaults.registry_path)
    check.add_argument(
        "--report", help="Attestation report hex; fetched from --url otherwise"
    )
    check.add_argument("--url", default=os.getenv("CRAG_URL"))
    check.add_argument("--root-public", default=os.getenv("CRAG_ROOT_PUBLIC"))
    check.set_defaults(func=cmd_registry_check)

    govern = commands.add_parser("govern", help="Threshold governance")
    govern_commands = govern.add_subparsers(dest="govern_command", required=True)
    propose = govern_commands.add_parser("propose")
    _add_server_args(propose)
    propose.add_argument("--rep-id", required=True)
    propose.add_argument(
        "--key", required=True, help="Representative signing secret file"
    )
    propose.add_argument(
        "--operation", required=True, choices=[op.value for op in Operation]
    )
    propose.add_argument("--param", action="append", help="name=value")
    propose.add_argument("--text-file", help="Replacement text, rules or policy")
    propose.add_argument("--out")
    propose.set_defaults(func=cmd_govern_propose)
    approve = govern_commands.add_parser("approve")
    _add_server_args(approve)
    approve.add_argument("--rep-id", required=True)
    approve.add_argument("--key", required=True)
    approve.add_argument("--proposal", required=True, help="Proposal JSON file")
    approve.add_argument("--submit", action="store_true")
    approve.add_argument("--out")
    approve.set_defaults(func=cmd_govern_approve)
    execute = govern_commands.add_parser("execute")
    _add_server_args(execute)
    execute.add_argument("--proposal-id", required=True)
    execute.add_argument("--approval", action="append", help="Approval JSON file")
    execute.add_argument("--text-file", help="Replacement text for update-record")
    execute.add_argument(
        "--recipient-key", help="Agreement secret to open an extraction"
    )
    execute.set_defaults(func=cmd_govern_execute)

    measure = commands.add_parser("measure", help="Print the measurement for a config")
    measure.add_argument("--config", default=cfg.config_path)
    measure.set_defaults(func=cmd_measure)

    serve = commands.add_parser("serve", help="Run the service")
    serve.add_argument("--config", default=cfg.config_path)
    serve.set_defaults(func=cmd_serve)
    return parser


def exit_code_for(error: Exception) -> int:
    if isinstance(error, (StartupError, cfg.ConfigError)):
        return EXIT_STARTUP
    if isinstance(error, (AttestationFailure, VerificationFailed)):
        return EXIT_VERIFICATION
    if isinstance(error, ServerError) and error.governance_refusal:
        return EXIT_GOVERNANCE
    if isinstance(error, GovernanceError):
        return EXIT_GOVERNANCE
    return EXIT_USAGE


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr)
    try:
        return args.func(args)
    except (
        UsageError,
        VerificationFailed,
        ClientError,
        StartupError,
        cfg.ConfigError,
        GovernanceError,
        RegistryError,
        AuditError,
        CryptoError,
        EnclaveError,
        OSError,
    ) as e:
        logger.error(str(e))
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
