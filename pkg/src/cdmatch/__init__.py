"""Control-plane / data-plane path comparison with IP-to-AS mapping inference."""

__version__ = "0.1.0"
