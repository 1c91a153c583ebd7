import numpy as np
import pytest

import xvit


def test_attention_shapes_and_mechanisms():
    p = xvit.AttentionParams.init(16, 4, seed=1)
    x = np.random.default_rng(0).uniform(-1, 1, (10, 16))
    for mech in ("xnorm", "softmax"):
        out = xvit.attention(mech, x, params=p)
        assert out.shape == (10, 16)
        assert np.all(np.isfinite(out))
    cross = xvit.attention("xnorm", x[:3], x, params=p)
    assert cross.shape == (3, 16)


def test_xnorm_matches_numpy():
    rng = np.random.default_rng(1)
    p = xvit.AttentionParams.init(8, 2, seed=2)
    p.gamma_q = np.array([1.5, 0.5])
    p.gamma_c = np.array([0.7, 1.2])
    x = rng.uniform(-1, 1, (6, 8))
    q, k, v = x @ p.w_q, x @ p.w_k, x @ p.w_v
    heads = []
    for h in range(2):
        s = slice(4 * h, 4 * h + 4)
        ctx = k[:, s].T @ v[:, s]
        qn = p.gamma_q[h] * q[:, s] / np.sqrt((q[:, s] ** 2).sum(1, keepdims=True) + p.eps**2)
        cn = p.gamma_c[h] * ctx / np.sqrt((ctx**2).sum(1, keepdims=True) + p.eps**2)
        heads.append(qn @ cn)
    want = np.concatenate(heads, axis=1) @ p.w_o
    np.testing.assert_allclose(xvit.attention("xnorm", x, params=p), want, atol=1e-12)


def test_assoc_and_counts():
    rng = np.random.default_rng(2)
    q, k, v = (rng.uniform(-1, 1, (32, 8)) for _ in range(3))
    assert xvit.assoc_check(q, k, v) < 1e-10
    model = xvit.Model(xvit.ModelConfig.named("nano"), seed=0)
    n = sum(a.size for a in model.parameters().values())
    assert xvit.count_params("nano") == n
    assert xvit.config("nano")["embed_dim"] == 64
    ratio = xvit.attention_flops("xnorm", 8192, 8192, 192, 4) / xvit.attention_flops(
        "xnorm", 4096, 4096, 192, 4
    )
    assert 1.99 <= ratio <= 2.01


def test_model_forward_and_checkpoint(tmp_path):
    cfg = xvit.ModelConfig.named("nano")
    model = xvit.Model(cfg, seed=3)
    img = np.random.default_rng(3).uniform(0, 1, (1, 32, 32))
    logits = model.forward(img)
    assert logits.shape == (cfg.num_classes,)
    path = tmp_path / "m.ckpt"
    model.save(path)
    again = xvit.Model.load(path)
    np.testing.assert_array_equal(again.forward(img), logits)
    raw = bytearray(path.read_bytes())
    raw[32] ^= 1
    path.write_bytes(bytes(raw))
    with pytest.raises(xvit.LoadError):
        xvit.Model.load(path)


def test_errors_map_to_python():
    with pytest.raises(xvit.ConfigError):
        xvit.count_params("giant")
    with pytest.raises(xvit.ShapeError):
        xvit.attention("xnorm", np.zeros((4, 8)), params=xvit.AttentionParams.init(16, 2))
    with pytest.raises(xvit.DataError):
        xvit.fit_power_law([1, 2, 4, 8], [1, 0, 4, 8])


def test_bench_and_fit():
    recs = xvit.run_bench("xnorm", [16, 32, 64, 128], dim=16, heads=2, iters=1, warmup=0)
    assert [r["N"] for r in recs] == [16, 32, 64, 128]
    assert all(r["peak_bytes"] > 0 for r in recs)
    k, _, r2 = xvit.fit_power_law([1, 2, 4, 8], [3, 12, 48, 192])
    assert abs(k - 2) < 1e-9 and r2 == pytest.approx(1.0)


def test_cli_in_process():
    code, out, _ = xvit.cli(["count", "--config", "nano", "--format", "text"])
    assert code == 0
    assert "params" in out
    assert xvit.cli(["bogus"])[0] == 2


def test_gradcheck_small(tmp_path):
    cfg = xvit.config("nano")
    cfg.update(image_size=8, embed_dim=8, heads=2, depth=1, class_depth=1, patch_stride=4)
    path = tmp_path / "s.json"
    path.write_text(xvit.ModelConfig.from_json(__import__("json").dumps(cfg)).to_json())
    report = xvit.gradcheck(str(path), samples=5)
    assert report["passed"]
