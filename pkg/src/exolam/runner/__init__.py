"""Configuration, sweeps, reports and the command-line entry point."""
