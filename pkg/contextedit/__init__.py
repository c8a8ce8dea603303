"""Context-aware instruction-guided image editing at desk scale."""
