"""Identity-aware correlation, risk scoring and guarded remediation for a
simulated Kubernetes plus OpenStack estate."""

from __future__ import annotations

__version__ = "0.1.0"
