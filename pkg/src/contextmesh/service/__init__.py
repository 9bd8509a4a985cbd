"""HTTP face of the simulator: stateless request/response over the core."""
