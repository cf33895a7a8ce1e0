"""Virtual nodes and gateways, and the load harness built on them."""
