"""Container overlay-network dataplane simulator."""
