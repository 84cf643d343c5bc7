"""Configuration, data ingestion, archiving, checkpoints and the CLI."""
