"""Contrastive likelihood-free inference: SRE and SNPE-C critics, an SNL baseline, simulators and metrics."""

__version__ = "0.1.0"
