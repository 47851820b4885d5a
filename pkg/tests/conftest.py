import hashlib
from pathlib import Path

import numpy as np
import pytest

from synth2real import generator as G

SRC = Path(G.__file__).parent


def _code_tag(*modules) -> str:
    h = hashlib.sha256()
    for name in modules:
        h.update((SRC / f"{name}.py").read_bytes())
    return h.hexdigest()[:12]


@pytest.fixture(scope="session")
def build_cache(request) -> Path:
    """Persistent cache for expensive artefacts, keyed by the source that builds them."""
    return Path(request.config.cache.mkdir("synth2real"))


@pytest.fixture(scope="session")
def desk_generator(build_cache):
    """The desk-scale generator (L=6, D=32, 64x64), pretrained once and cached on disk."""
    path = build_cache / f"desk_gen_{_code_tag('generator', 'autodiff', 'synthrender', 'imageops')}.npz"
    if path.exists():
        return G.load_generator(path)
    spec = G.make_generator(0)
    G.save_generator(spec, path)
    return spec


@pytest.fixture(scope="session")
def desk_basis(build_cache, desk_generator):
    path = build_cache / f"desk_basis_{G.content_hash(desk_generator)[:12]}.npz"
    if path.exists():
        return G.SteeringBasis.load(path)
    basis = G.derive_basis(desk_generator)
    basis.save(path)
    return basis


@pytest.fixture(scope="session")
def tiny_generator():
    """L=2, D=4, 16x16 generator; untrained weights are enough for most checks."""
    return G.init_generator(0, n_layers=2, style_dim=4, resolution=16)


@pytest.fixture(scope="session")
def tiny_basis(tiny_generator):
    return G.derive_basis(tiny_generator, n_annotate=400, k_centroids=4, seed=0)


@pytest.fixture(scope="session")
def tiny_trained():
    """L=2, D=4, 16x16 generator with a short pretraining run, plus its basis."""
    spec = G.make_generator(0, n_layers=2, style_dim=4, resolution=16, pretrain_steps=300)
    return spec, G.derive_basis(spec, n_annotate=2000, k_centroids=8, seed=0)


def pytest_terminal_summary(terminalreporter):
    from helpers import CRITERIA
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
