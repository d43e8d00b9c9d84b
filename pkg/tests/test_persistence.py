import struct

import numpy as np
import pytest

from models.data import FeatureMatrix
from models.errors import ConfigError, FormatError
from models.network import ModelSpec
from utils import backprop, helpers
from utils.persistence import (
    ArtifactStore,
    CHECKPOINT_MAGIC,
    decode_checkpoint,
    encode_checkpoint,
    sidecar_path,
)


@pytest.fixture
def store(tmp_path):
    return ArtifactStore(tmp_path)


def test_checkpoint_save_and_load(store, toy_encoder, rng):
    params = backprop.init_params(toy_encoder, rng)
    path = store.save_checkpoint('encoder.dprp', toy_encoder, params, seed=5, provenance={'phase': 'pretrain'})
    assert path.read_bytes()[:4] == CHECKPOINT_MAGIC

    spec, loaded, meta = store.load_checkpoint(path)
    assert spec == toy_encoder
    assert loaded.layout == params.layout
    np.testing.assert_array_equal(loaded.values, params.values)
    assert meta['seed'] == 5
    assert meta['provenance'] == {'phase': 'pretrain'}
    assert meta['content_hash'] == helpers.content_hash(path.read_bytes())


def test_checkpoint_layout_on_disk(rng):
    spec = ModelSpec(kind='linear_head', input_dim=2, output_dim=3)
    params = backprop.init_params(spec, rng)
    blob = encode_checkpoint(params)
    version, count = struct.unpack_from('<HI', blob, 4)
    assert (version, count) == (1, 2)
    (name_len,) = struct.unpack_from('<H', blob, 10)
    assert blob[12:12 + name_len] == b'layer0.weight'
    assert blob[12 + name_len] == 2
    np.testing.assert_array_equal(np.frombuffer(blob[-params.size * 8:], dtype='<f8'), params.values)


def test_bad_magic_and_version(rng):
    spec = ModelSpec(kind='linear_head', input_dim=2, output_dim=3)
    blob = encode_checkpoint(backprop.init_params(spec, rng))
    with pytest.raises(FormatError):
        decode_checkpoint(b'XXXX' + blob[4:])
    with pytest.raises(FormatError):
        decode_checkpoint(blob[:4] + struct.pack('<H', 2) + blob[6:])
    with pytest.raises(FormatError):
        decode_checkpoint(blob[:-8])


def test_sidecar_must_match_segments(store, rng):
    spec = ModelSpec(kind='linear_head', input_dim=2, output_dim=3)
    path = store.save_checkpoint('head.dprp', spec, backprop.init_params(spec, rng), seed=0)
    meta = helpers.read_json(sidecar_path(path))
    meta['model']['output_dim'] = 4
    helpers.write_json(sidecar_path(path), meta)
    with pytest.raises(FormatError):
        store.load_checkpoint(path)


def test_dataset_save_and_load(store, toy_train):
    path = store.save_dataset('data/train.dpri', toy_train, seed=3)
    assert path.read_bytes()[:4] == b'DPRI'
    loaded = store.load_dataset(path)
    np.testing.assert_array_equal(loaded.inputs, toy_train.inputs)
    np.testing.assert_array_equal(loaded.labels, toy_train.labels)
    assert loaded.image_size == toy_train.image_size


def test_features_save_and_load(store, rng):
    features = FeatureMatrix(rows=rng.standard_normal((6, 4)), provenance={'norm_C': 50.0})
    path = store.save_features('features.dprf', features, preproc={'sigma1': 0.0})
    assert path.read_bytes()[:4] == b'DPRF'
    loaded = store.load_features(path)
    np.testing.assert_array_equal(loaded.rows, features.rows)
    assert loaded.provenance == {'norm_C': 50.0}


def test_writes_stay_inside_root(store, toy_encoder, rng):
    params = backprop.init_params(toy_encoder, rng)
    with pytest.raises(ConfigError):
        store.save_checkpoint('../escape.dprp', toy_encoder, params, seed=0)
    with pytest.raises(ConfigError):
        store.save_json('/tmp/elsewhere.json', {})


def test_missing_file(store):
    with pytest.raises(ConfigError):
        store.load_dataset(store.root / 'nope.dpri')


def test_content_hash_is_order_sensitive():
    assert helpers.content_hash('a', 'b') != helpers.content_hash('b', 'a')
    assert helpers.content_hash(b'x') == helpers.content_hash('x')
