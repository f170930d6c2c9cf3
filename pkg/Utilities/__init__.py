"""Console, configuration, table and tensor file helpers."""
