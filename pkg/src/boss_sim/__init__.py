"""BOSS branch-outcome side-channel simulator and instrumentation toolkit."""
