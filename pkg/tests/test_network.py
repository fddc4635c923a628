import struct
import zlib

import numpy as np
import pytest

from dilatedseg import network as net
from dilatedseg import tensor_core as tc
from dilatedseg.errors import (BadMagicError, ChecksumError, ConfigError, FormatError,
                               ShapeError, ShapeInconsistencyError, TruncatedPayloadError,
                               VersionMismatchError)
from oracles import numeric_grad, rel_err

TABLE1_FIELDS = [3, 5, 9, 17, 33, 65, 129, 131, 131, 131]
TABLE1_PARAMS = [320] + [9248] * 6 + [9344, 6912, 579]


def tiny_config(batchnorm=True):
    L = net.LayerSpec
    return net.NetworkConfig((
        L(3, 1, 4),
        L(3, 2, 4),
        L(3, 1, 4, has_bias=not batchnorm, has_batchnorm=batchnorm, has_dropout=batchnorm),
        L(1, 1, 3, activation="softmax"),
    ), dropout_rate=0.3)


def test_table1_fields_and_params():
    cfg = net.default_config()
    assert net.receptive_field(cfg) == TABLE1_FIELDS
    per_layer, total = net.parameter_count(cfg)
    assert per_layer == TABLE1_PARAMS
    assert total == 72643
    assert [l.kernel_size for l in cfg.layers] == [3] * 8 + [1, 1]
    assert [l.dilation for l in cfg.layers] == [1, 1, 2, 4, 8, 16, 32, 1, 1, 1]
    assert [l.out_channels for l in cfg.layers] == [32] * 8 + [192, 3]
    assert [l.has_batchnorm for l in cfg.layers] == [False] * 7 + [True, True, False]
    assert cfg.num_classes == 3 and cfg.layers[-1].activation == "softmax"


def test_layer9_count():
    cfg = net.default_config()
    assert net.parameter_count(cfg)[0][8] == 32 * 192 + 4 * 192 == 6912


def test_total_is_not_76423():
    # a transposed total appears in one place in the source text; Table 1 sums to 72,643
    assert sum(TABLE1_PARAMS) == 72643 != 76423


def test_undilated_control():
    cfg = net.default_config(dilated=False)
    assert net.receptive_field(cfg)[-1] == 17
    assert net.parameter_count(cfg)[1] == 72643


def test_single_layer_toy():
    cfg = net.NetworkConfig((net.LayerSpec(3, 1, 1, activation="none"),))
    assert net.receptive_field(cfg) == [3]
    assert net.parameter_count(cfg) == ([10], 10)


def test_exponential_field_linear_params():
    cfg = net.default_config()
    fields = net.receptive_field(cfg)
    per_layer, _ = net.parameter_count(cfg)
    growth = [fields[i] - 1 for i in range(1, 7)]
    assert all(growth[i + 1] == 2 * growth[i] for i in range(1, 5))
    assert set(per_layer[1:7]) == {9248}


def test_layer_spec_invariants():
    with pytest.raises(ShapeError):
        net.LayerSpec(3, 1, 4, has_bias=True, has_batchnorm=True)
    with pytest.raises(ShapeError):
        net.LayerSpec(3, 0, 4)
    with pytest.raises(ShapeError):
        net.NetworkConfig((net.LayerSpec(1, 1, 3, activation="elu"),))


# -- forward ----------------------------------------------------------------

@pytest.fixture(scope="module")
def table1():
    cfg = net.default_config()
    return cfg, net.init_weights(cfg, np.random.default_rng(0))


def test_forward_201(table1):
    cfg, w = table1
    x = np.random.default_rng(1).standard_normal((1, 1, 201, 201)).astype(np.float32)
    p, cache = net.forward(cfg, w, x)
    assert p.shape == (1, 3, 71, 71) and cache is None
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-5)
    p2, _ = net.forward(cfg, w, x)
    assert np.array_equal(p, p2)


def test_forward_131(table1):
    cfg, w = table1
    p, _ = net.forward(cfg, w, np.zeros((1, 1, 131, 131), np.float32))
    assert p.shape == (1, 3, 1, 1)


def test_forward_too_small(table1):
    cfg, w = table1
    with pytest.raises(ShapeError, match="131"):
        net.forward(cfg, w, np.zeros((1, 1, 130, 140), np.float32))


def test_forward_chunking_is_exact(table1):
    cfg, w = table1
    x = np.random.default_rng(2).standard_normal((3, 1, 133, 133)).astype(np.float32)
    a, _ = net.forward(cfg, w, x)
    b, _ = net.forward(cfg, w, x, chunk=1)
    assert np.array_equal(a, b)


def test_output_extent_law():
    for width, dilated in ((4, True), (4, False)):
        cfg = net.default_config(width=width, dilated=dilated)
        w = net.init_weights(cfg, np.random.default_rng(0))
        H = cfg.field + 5
        p, _ = net.forward(cfg, w, np.zeros((1, 1, H, H + 2), np.float32))
        assert p.shape[2:] == (H - cfg.field + 1, H + 2 - cfg.field + 1)
        assert net.output_extent(cfg, H) == H - (cfg.field - 1)


def test_locality():
    cfg = net.default_config(width=4)
    w = net.init_weights(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 1, 135, 135)).astype(np.float32)
    p, _ = net.forward(cfg, w, x)
    # output (0, 0) sees input rows/cols 0..130 only
    y = x.copy()
    y[:, :, 131:, :] = rng.standard_normal((1, 1, 4, 135))
    y[:, :, :, 131:] = rng.standard_normal((1, 1, 135, 4))
    q, _ = net.forward(cfg, w, y)
    assert q[0, :, 0, 0].tolist() == p[0, :, 0, 0].tolist()
    assert not np.array_equal(q[0, :, 4, 4], p[0, :, 4, 4])


# -- init -------------------------------------------------------------------

def test_init_statistics_and_constants():
    cfg = net.default_config()
    w = net.init_weights(cfg, np.random.default_rng(0))
    sample = w[1]["weight"].ravel()  # 32*32*9 = 9216 draws, fan-in 288
    big = np.concatenate([w[i]["weight"].ravel() for i in range(1, 7)])[:10000]
    for s in (sample, big):
        assert abs(s.std() / np.sqrt(2 / 288) - 1) < 0.1
    for i in (7, 8):
        assert np.all(w[i]["gamma"] == 1) and np.all(w[i]["beta"] == 0)
        assert np.all(w[i]["running_mean"] == 0) and np.all(w[i]["running_var"] == 1)
    assert all(np.all(p["bias"] == 0) for p in w if "bias" in p)


def test_init_deterministic():
    cfg = net.default_config(width=8)
    a = net.init_weights(cfg, np.random.default_rng(7))
    b = net.init_weights(cfg, np.random.default_rng(7))
    assert all(np.array_equal(pa[k], pb[k]) for pa, pb in zip(a, b) for k in pa)


# -- gradients --------------------------------------------------------------

def _loss(cfg, w, x, t, seed):
    p, _ = net.forward(cfg, w, x, train=True, rng=np.random.default_rng(seed))
    return tc.cross_entropy(p, t)[0]


@pytest.mark.parametrize("trial", range(20))
def test_end_to_end_gradient(trial):
    cfg = tiny_config()
    rng = np.random.default_rng(500 + trial)
    w = net.init_weights(cfg, rng, dtype=np.float64)
    for p in w:
        for k in ("bias", "beta"):
            if k in p:
                p[k] = rng.standard_normal(p[k].shape) * 0.1
        if "gamma" in p:
            p["gamma"] = rng.uniform(0.5, 1.5, p["gamma"].shape)
    x = rng.standard_normal((2, 1, 17, 17))
    t = rng.integers(0, 3, (2, 9, 9))
    probs, cache = net.forward(cfg, w, x, train=True, rng=np.random.default_rng(trial))
    _, g = tc.cross_entropy(probs, t)
    grads = net.backward(cfg, w, cache, g)
    for i, gi in enumerate(grads):
        for name, ga in gi.items():
            num = numeric_grad(lambda: _loss(cfg, w, x, t, trial), w[i][name])
            assert rel_err(ga, num) < 1e-4, (i, name)


def test_running_stats_update():
    cfg = tiny_config()
    w = net.init_weights(cfg, np.random.default_rng(0), dtype=np.float64)
    x = np.random.default_rng(1).standard_normal((2, 1, 17, 17)) + 3.0
    _, cache = net.forward(cfg, w, x, train=True, rng=np.random.default_rng(0))
    w2 = net.updated_running_stats(cfg, w, cache)
    bn = cache.layers[2].bn
    assert np.allclose(w2[2]["running_mean"], 0.1 * bn.batch_mean)
    assert np.all(w[2]["running_mean"] == 0)  # original untouched


# -- weight file ------------------------------------------------------------

def _saved(tmp_path, cfg=None):
    cfg = cfg or net.default_config()
    w = net.init_weights(cfg, np.random.default_rng(3))
    path = tmp_path / "w.dcnw"
    net.save_weights(cfg, w, path)
    return cfg, w, path


def test_weight_roundtrip(tmp_path):
    cfg, w, path = _saved(tmp_path)
    cfg2, w2 = net.load_weights(path)
    assert cfg2 == cfg
    for a, b in zip(w, w2):
        assert a.keys() == b.keys()
        for k in a:
            assert a[k].tobytes() == b[k].tobytes()
    assert net.encode_weights(cfg2, w2) == path.read_bytes()


def test_weight_file_layout(tmp_path):
    cfg, w, path = _saved(tmp_path, tiny_config())
    data = path.read_bytes()
    assert data[:4] == b"DCNW" and data[4] == 1
    assert int.from_bytes(data[5:7], "little") == 4
    # layer 3: kernel 3, dilation 1, 4 channels, flags bn|dropout|elu
    off = 7 + 2 * 6
    assert data[off:off + 6] == bytes([3, 1, 0, 4, 0, 0b1110])


def test_weight_file_errors(tmp_path):
    _, _, path = _saved(tmp_path, tiny_config())
    data = path.read_bytes()
    with pytest.raises(BadMagicError):
        net.decode_weights(b"XCNW" + data[4:])
    with pytest.raises(VersionMismatchError):
        net.decode_weights(data[:4] + b"\x02" + data[5:])
    with pytest.raises(TruncatedPayloadError):
        net.decode_weights(data[:-4])
    with pytest.raises(TruncatedPayloadError):
        net.decode_weights(data[:40])
    corrupted = bytearray(data)
    corrupted[60] ^= 0xFF
    with pytest.raises(ChecksumError):
        net.decode_weights(bytes(corrupted))


def test_weight_file_shape_inconsistency():
    cfg = tiny_config(batchnorm=False)
    w = net.init_weights(cfg, np.random.default_rng(0))
    w[1]["weight"] = np.zeros((4, 3, 3, 3), np.float32)  # wrong in-channels
    with pytest.raises(ShapeError):
        net.encode_weights(cfg, w)
    # forge a file that bypasses the encoder check
    good = net.init_weights(cfg, np.random.default_rng(0))
    net.check_weights(cfg, good)
    buf = bytearray(net.encode_weights(cfg, good)[:-4])
    # rewrite layer 2 weight dims (4, 4, 3, 3) -> (4, 4, 1, 9): same payload size, wrong shape
    hdr = struct.pack("<B4I", 4, 4, 4, 3, 3)
    pos = buf.index(hdr, buf.index(hdr) + 1)
    buf[pos:pos + len(hdr)] = struct.pack("<B4I", 4, 4, 4, 1, 9)
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    with pytest.raises(ShapeInconsistencyError):
        net.decode_weights(bytes(buf))


def test_load_missing_file(tmp_path):
    with pytest.raises(FormatError):
        net.load_weights(tmp_path / "nope.dcnw")


# -- config entries ---------------------------------------------------------

def test_config_entries_roundtrip():
    for cfg in (net.default_config(), net.default_config(width=8, dilated=False), tiny_config()):
        entries = [(k, v, i) for i, (k, v) in enumerate(net.config_to_entries(cfg).items(), 1)]
        assert net.config_from_entries(entries) == cfg


def test_config_unknown_key_line_number():
    with pytest.raises(ConfigError) as info:
        net.config_from_entries([("kernels", "3", 1), ("dilatoins", "1", 2)])
    assert info.value.lineno == 2
