"""Score-matching laboratory."""
