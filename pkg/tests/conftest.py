import numpy as np
import pytest

from reviewfunnel.corpus import Item, embedding_fingerprint, normalize_embedding


def make_items(vectors, accounts=None, impressions=None, ground_truth=None, ids=None):
    """Build items from raw vectors; embeddings are unit-normalized."""
    items = []
    for row, vec in enumerate(vectors):
        emb = normalize_embedding(np.asarray(vec, dtype=np.float64))
        items.append(
            Item(
                item_id=ids[row] if ids is not None else row,
                embedding=emb,
                account_id=accounts[row] if accounts is not None else 0,
                impressions=impressions[row] if impressions is not None else 1,
                exact_hash=embedding_fingerprint(emb),
                created_round=0,
                ground_truth=None if ground_truth is None else ground_truth[row],
            )
        )
    return items


def planted_blob(center, count, sigma, rng):
    """Vectors scattered around a unit-normalized center."""
    center = np.asarray(center, dtype=np.float64)
    center = center / np.linalg.norm(center)
    if count == 1:
        return [center]
    rows = center[None, :] + sigma * rng.standard_normal((count - 1, len(center)))
    return [center] + list(rows)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
