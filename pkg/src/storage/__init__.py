"""存储模块"""
from src.storage.artifact_store import ArtifactStore

__all__ = ['ArtifactStore']
