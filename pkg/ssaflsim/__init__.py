"""SSAFL Simulator - similarity-aware asynchronous federated policy verification"""

__version__ = "0.3.0"
