"""Malware triage and CVE attribution for decompiled Java archives."""

__version__ = "0.1.0"
