"""cisosdm: multi-species distribution modeling conditioned on incomplete
species observations, with baselines, data plumbing, and a synthetic oracle."""

__version__ = "0.1.0"
