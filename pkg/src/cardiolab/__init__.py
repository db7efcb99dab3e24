"""Lab-value abnormality estimation and monitoring from 12-lead ECG plus tabular context."""

__version__ = "0.1.0"
