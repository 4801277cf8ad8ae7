"""Verification campaigns: estimate catalog, weak-type profiles, counterexample."""
