"""churnstore: storage and search in dynamic peer-to-peer networks under
adversarial node churn — protocol library plus round-synchronous simulator."""

__version__ = "0.1.0"
