"""Few-shot segmentation with query-mined background prototypes."""
