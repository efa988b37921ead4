from fbsde_pricer.memtune import tune_allocator

tune_allocator()
