"""TPM-backed authentication proxy with an emulated TPM 1.2 and a simulation harness."""

__version__ = "0.1.0"
