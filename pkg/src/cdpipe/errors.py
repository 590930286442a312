"""Error types shared across the pipeline."""


class DataError(Exception):
    """Files, datasets, or wire formats that cannot be read or validated."""


class CheckpointError(DataError):
    """Checkpoint magic/version/structure problems."""


class NumericError(Exception):
    """Non-finite values where the math requires finite ones."""
