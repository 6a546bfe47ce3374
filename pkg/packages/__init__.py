"""Top-level package namespace for monorepo libraries."""
