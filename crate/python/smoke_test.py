"""Quick end-to-end check of the tada_kv extension module."""

import json
import random

import tada_kv


def main():
    codes, scale, lo = tada_kv.quantize_group([-1.0, 0.0, 1.0, 2.0], 2)
    assert codes == [0, 1, 2, 3] and scale == 1.0 and lo == -1.0

    ratio = tada_kv.memory_ratio(32, 128, [4] * 32, tokens=4096)
    assert ratio == 0.296875, ratio

    rng = random.Random(0)
    heads, dim, tokens = 2, 8, 12
    keys = [rng.gauss(0, 1) for _ in range(tokens * heads * dim)]
    values = [rng.gauss(0, 1) for _ in range(tokens * heads * dim)]
    cache = tada_kv.LayerCache(heads, dim, residual_length=4, bits=4)
    cache.append(keys, values)
    assert len(cache) == tokens
    assert cache.compressed_tokens + cache.residual_count == tokens

    queries = [rng.gauss(0, 1) for _ in range(4 * dim)]
    naive = cache.attend(queries)
    tiled = cache.attend(queries, block_tokens=3)
    assert max(abs(a - b) for a, b in zip(naive, tiled)) < 1e-5

    restored = tada_kv.LayerCache.deserialize(cache.serialize())
    assert restored == cache
    try:
        tada_kv.LayerCache.deserialize(cache.serialize()[:-1])
    except tada_kv.TadaError as e:
        assert "format" in str(e)
    else:
        raise AssertionError("truncated cache accepted")

    model = tada_kv.ToyModel.synthetic(seed=1)
    out = model.generate([1, 2, 3], 8, plan=[16] * model.num_layers, residual_length=0)
    assert out[:3] == [1, 2, 3] and len(out) == 11
    again = tada_kv.ToyModel.from_bytes(model.to_bytes())
    assert again.generate([1, 2, 3], 8, plan=[16] * 4, residual_length=0) == out

    best, report = tada_kv.random_search(model, candidates=4, seed=2, calib_seqs=1, calib_len=12)
    report = json.loads(report)
    assert len(best) == model.num_layers
    assert report["candidates"][report["best_index"]]["plan"] == best

    print("smoke test passed:", cache, model, "best plan", best)


if __name__ == "__main__":
    main()
