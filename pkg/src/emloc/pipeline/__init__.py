"""Files, configuration, synthetic tasks, the experiment harness and the CLI."""
