def initialize(threads: int = 4, seed: int = 0):
    import logging
    import os

    import numpy as np
    import torch

    os.environ["CUDA_VISIBLE_DEVICES"] = ""

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(threads)
    torch.manual_seed(seed)
    np.random.seed(seed)
