import torch


def as_generator(seed=None, generator=None) -> torch.Generator:
    """Return `generator` if given, else a fresh CPU generator seeded with `seed` (default 0)."""
    if generator is not None:
        return generator
    g = torch.Generator()
    g.manual_seed(0 if seed is None else int(seed))
    return g


def child_seed(generator: torch.Generator) -> int:
    """Draw a seed for code paths that can only use the global RNG."""
    return int(torch.randint(0, 2**62, (1,), generator=generator))
