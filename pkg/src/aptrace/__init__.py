"""Contact analytics from WiFi association logs.

Pipeline: ingest association logs into colocation records, build time-varying
AP-colocation contact graphs, infer ground-truth labels from building
occupancy patterns, score cumulative exposure, and validate contact
prediction; a seeded synthetic campus generator provides known ground truth.
"""

__version__ = "0.1.0"
