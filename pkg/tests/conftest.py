import functools
import json

import pytest

from crag import cfg
from crag.audit import AuditLog
from crag.crypto import KeyKind, generate_keypair
from crag.enclave import Platform
from crag.governance import (
    Governance,
    GovernancePolicy,
    Representative,
    approve,
    parse_operation,
)
from crag.rag import ClientRegistration, ExtractiveGenerator, RagPipeline
from crag.redaction import default_redactor
from crag.utils import create_tables, make_session_factory
from crag.vector_store import EncryptedVectorStore

CODE_ID = b"crag-test-build"
REPRESENTATIVES = ("alice", "bob", "carol")


def measured_config(**overrides) -> bytes:
    config = cfg.ServerConfig(**overrides)
    return config.measured_bytes(ExtractiveGenerator.generator_id)


@pytest.fixture
def platform():
    return Platform.generate()


@pytest.fixture
def enclave(platform):
    return platform.boot(CODE_ID, measured_config())


@pytest.fixture
def audit(tmp_path, enclave):
    log = AuditLog(tmp_path / "audit.jsonl", enclave)
    yield log
    log.close()


@pytest.fixture
def rep_keys():
    return {rep_id: generate_keypair(KeyKind.SIGNING) for rep_id in REPRESENTATIVES}


@pytest.fixture
def policy(rep_keys):
    return GovernancePolicy(
        [Representative(rep_id, keys.public_key) for rep_id, keys in rep_keys.items()],
        2,
    )


@pytest.fixture
def session_factory():
    sessions = make_session_factory("sqlite://")
    create_tables(sessions)
    return sessions


@pytest.fixture
def governance(policy, session_factory, enclave, audit):
    return Governance(policy, session_factory, enclave, audit)


@pytest.fixture
def governed(governance, rep_keys):
    """Propose, approve with the given representatives and execute"""

    def run(operation, params, signers=("alice", "bob")):
        proposal = governance.propose(parse_operation(operation), params)
        approvals = [
            approve(governance.policy, proposal, rep_keys[rep_id], rep_id)
            for rep_id in signers
        ]
        return governance.execute(proposal.proposal_id, approvals)

    return run


@pytest.fixture
def redactor():
    return default_redactor()


@pytest.fixture
def store(tmp_path, enclave, audit, governance):
    vector_store = EncryptedVectorStore(
        tmp_path / "store.cvs", enclave, audit, 64, governance
    )
    yield vector_store
    vector_store.close()


@pytest.fixture
def client_keys():
    return {
        "clinic": generate_keypair(KeyKind.SIGNING),
        "public-app": generate_keypair(KeyKind.SIGNING),
    }


@pytest.fixture
def clients(client_keys):
    return {
        "clinic": ClientRegistration(
            "clinic", client_keys["clinic"].public_key, "private"
        ),
        "public-app": ClientRegistration(
            "public-app", client_keys["public-app"].public_key, "open"
        ),
    }


@pytest.fixture
def pipeline(platform, enclave, store, audit, clients, redactor):
    return RagPipeline(
        enclave,
        store,
        audit,
        clients,
        functools.partial(platform.attest, enclave),
        redactor,
    )


@pytest.fixture
def server_config(tmp_path, policy, clients):
    """A ServerConfig whose files all live under tmp_path"""
    (tmp_path / "policy.json").write_text(policy.to_json(), encoding="utf-8")
    (tmp_path / "clients.json").write_text(
        json.dumps(
            [
                {
                    "client_id": client.client_id,
                    "signing_public": client.signing_public.hex(),
                    "scope": client.scope.value,
                }
                for client in clients.values()
            ]
        ),
        encoding="utf-8",
    )
    state = tmp_path / "state"
    return cfg.ServerConfig(
        store_path=str(state / "store.cvs"),
        audit_path=str(state / "audit.jsonl"),
        registry_path=str(state / "registry.json"),
        policy_path=str(tmp_path / "policy.json"),
        db_url="sqlite:///{}".format(state / "governance.db"),
        clients_path=str(tmp_path / "clients.json"),
        device_secret_path=str(state / "device.secret"),
        root_secret_path=str(state / "platform-root.secret"),
        artifact_version="v1",
        shutdown_timeout=0.5,
    )
