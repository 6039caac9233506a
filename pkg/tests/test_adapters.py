from __future__ import annotations

import pytest

from cloudguard.adapters import normalize
from cloudguard.errors import NormalizationError
from cloudguard.model import Priority, Severity, Source


def test_falco_event():
    e = normalize({"adapter": "falco", "event_id": "f1", "timestamp": 10, "pod": "pod/ns/p",
                   "rule": "TerminalShell", "priority": "warning", "user": "intruder"})
    assert (e.control_id, e.resource_id, e.source) == ("RT.SHELL.CONTAINER", "pod/ns/p", Source.RUNTIME)
    assert e.priority is Priority.WARNING and e.severity is Severity.MEDIUM
    assert e.subject_id == "intruder" and e.confidence == 0.9


def test_bare_pod_name_is_prefixed():
    e = normalize({"adapter": "falco", "event_id": "f1", "timestamp": 0, "pod": "p", "rule": "CryptoMiner"})
    assert e.resource_id == "pod/p"


def test_keystone_event():
    e = normalize({"adapter": "keystone", "event_id": "k1", "timestamp": 3, "event": "role_escalation",
                   "project": "p1", "actor": "mallory", "role": "admin"})
    assert e.control_id == "OS.IAM.ROLE-ESCALATION"
    assert e.resource_id == "project/p1" and e.source is Source.IDENTITY
    assert e.subject_id == "mallory" and e.evidence["role"] == "admin"


def test_neutron_event_is_runtime():
    e = normalize({"adapter": "neutron", "event_id": "n1", "timestamp": 3, "event": "sg_change", "project": "p1"})
    assert e.source is Source.RUNTIME and e.priority is Priority.NOTICE


def test_iac_row():
    e = normalize({"adapter": "iac", "event_id": "i1", "timestamp": 0,
                   "row": {"check_id": "CKV_OPENSTACK_2", "resource": "iac/r/rule", "file_path": "main.tf"}})
    assert e.control_id == "IAC.NET.OPEN-CIDR" and e.source is Source.IAC_SCAN


def test_normalized_event_passes_through():
    e = normalize({"adapter": "falco", "event_id": "f1", "timestamp": 0, "pod": "p", "rule": "CryptoMiner"})
    assert normalize(e) is e


@pytest.mark.parametrize(
    "raw, code",
    [
        ({"adapter": "syslog", "event_id": "x", "timestamp": 0}, "unroutable-event"),
        ({"event_id": "x", "timestamp": 0}, "unroutable-event"),
        ({"adapter": "falco", "timestamp": 0, "pod": "p", "rule": "CryptoMiner"}, "unroutable-event"),
        ({"adapter": "falco", "event_id": "x", "timestamp": -5, "pod": "p", "rule": "CryptoMiner"}, "unroutable-event"),
        ({"adapter": "falco", "event_id": "x", "timestamp": 0, "pod": "p", "rule": "Unknown"}, "unroutable-event"),
        ({"adapter": "falco", "event_id": "x", "timestamp": 0, "rule": "CryptoMiner"}, "missing-resource"),
        ({"adapter": "keystone", "event_id": "x", "timestamp": 0, "event": "auth_failure"}, "missing-resource"),
        ({"adapter": "iac", "event_id": "x", "timestamp": 0, "row": {"check_id": "CKV_OPENSTACK_2"}}, "missing-resource"),
        ({"adapter": "cbe", "event_id": "x", "timestamp": 0}, "unroutable-event"),
    ],
)
def test_adapter_errors(raw, code):
    with pytest.raises(NormalizationError) as err:
        normalize(raw)
    assert err.value.code == code
