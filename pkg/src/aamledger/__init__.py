"""Distributed ledger for advanced air mobility: 4D volume contracts, validation chains,
in-flight conflict resolution, flight reporting, and multilateration."""

__version__ = "0.1.0"
