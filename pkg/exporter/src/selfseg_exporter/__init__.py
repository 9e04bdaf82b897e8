from .export import ExportError, ExportSpec, export, export_synthetic

__all__ = ["ExportError", "ExportSpec", "export", "export_synthetic"]
