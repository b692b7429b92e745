"""fedstl: STL-property-guided personalized federated learning, simulated deterministically."""

__version__ = "0.1.0"
