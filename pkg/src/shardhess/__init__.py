"""Matrix-free Hessian analysis with shard-local finite differences."""
