from windinr.runtime import tune_allocator

tune_allocator()
