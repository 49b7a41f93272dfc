"""
Tests for binary artifact formats
"""

import os
import shutil
import struct
import tempfile
import unittest

import numpy as np

from .exceptions import CheckpointError, FormatError
from .formats import (decode_checkpoint, decode_pnm, decode_tensor, encode_checkpoint, encode_pnm, encode_tensor,
                      load_array, load_checkpoint, load_json, load_tensor, save_checkpoint, save_json, save_pnm,
                      save_tensor)
from .rng import StreamRegistry, named_stream


class TestTensorFormat(unittest.TestCase):
    """GATN tensors"""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_header_layout(self):
        blob = encode_tensor(np.arange(6, dtype=np.uint8).reshape(2, 3))
        self.assertEqual(blob[:4], b"GATN")
        self.assertEqual(struct.unpack_from("<HBB", blob, 4), (1, 0, 2))
        self.assertEqual(struct.unpack_from("<2I", blob, 8), (2, 3))
        self.assertEqual(blob[16:], bytes(range(6)))

    def test_dtypes_preserved(self):
        for dtype in (np.uint8, np.int32, np.int64, np.float32, np.float64):
            arr = np.arange(12).reshape(3, 4).astype(dtype)
            out = decode_tensor(encode_tensor(arr))
            self.assertEqual(out.dtype, np.dtype(dtype))
            np.testing.assert_array_equal(out, arr)

    def test_unsupported_dtype(self):
        with self.assertRaises(FormatError):
            encode_tensor(np.zeros(3, dtype=np.complex128))

    def test_bad_magic_and_truncation(self):
        blob = encode_tensor(np.ones((2, 2)))
        with self.assertRaises(FormatError):
            decode_tensor(b"XXXX" + blob[4:])
        with self.assertRaises(FormatError):
            decode_tensor(blob[:-1])

    def test_save_load(self):
        path = os.path.join(self.temp_dir, "x.gatn")
        arr = np.random.default_rng(0).uniform(size=(3, 5, 7))
        save_tensor(path, arr)
        np.testing.assert_array_equal(load_tensor(path), arr)
        np.testing.assert_array_equal(load_array(path), arr)
        self.assertEqual([f for f in os.listdir(self.temp_dir) if f.endswith(".tmp")], [])

    def test_missing_file(self):
        with self.assertRaises(FormatError):
            load_tensor(os.path.join(self.temp_dir, "missing.gatn"))


class TestCheckpointFormat(unittest.TestCase):
    """GACK checkpoints"""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_named_entries(self):
        params = {"seg.enc0.weight": np.ones((2, 1, 3, 3)), "seg.enc0.bias": np.zeros(2), "#step": np.array([4.0])}
        out = decode_checkpoint(encode_checkpoint(params))
        self.assertEqual(list(out), list(params))
        for name in params:
            np.testing.assert_array_equal(out[name], params[name])

    def test_trailing_bytes(self):
        with self.assertRaises(CheckpointError):
            decode_checkpoint(encode_checkpoint({"a": np.ones(2)}) + b"\x00")

    def test_truncated(self):
        with self.assertRaises(CheckpointError):
            decode_checkpoint(encode_checkpoint({"a": np.ones(4)})[:-3])

    def test_missing(self):
        with self.assertRaises(CheckpointError):
            load_checkpoint(os.path.join(self.temp_dir, "none.gack"))

    def test_save_load(self):
        path = os.path.join(self.temp_dir, "m.gack")
        save_checkpoint(path, {"w": np.arange(6.0).reshape(2, 3)})
        np.testing.assert_array_equal(load_checkpoint(path)["w"], np.arange(6.0).reshape(2, 3))


class TestPNM(unittest.TestCase):
    """P5 / P6 pixmaps"""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_gray(self):
        img = np.arange(12, dtype=np.uint8).reshape(3, 4)
        blob = encode_pnm(img)
        self.assertTrue(blob.startswith(b"P5\n4 3\n255\n"))
        np.testing.assert_array_equal(decode_pnm(blob), img)

    def test_color(self):
        img = np.random.default_rng(1).integers(0, 256, size=(3, 5, 4)).astype(np.uint8)
        blob = encode_pnm(img)
        self.assertTrue(blob.startswith(b"P6\n"))
        np.testing.assert_array_equal(decode_pnm(blob), img)

    def test_header_comment(self):
        blob = b"P5\n# made by hand\n2 1\n255\n" + bytes([7, 9])
        np.testing.assert_array_equal(decode_pnm(blob), [[7, 9]])

    def test_rejects_float(self):
        with self.assertRaises(FormatError):
            encode_pnm(np.zeros((2, 2)))

    def test_load_array_dispatch(self):
        path = os.path.join(self.temp_dir, "a.pgm")
        save_pnm(path, np.full((2, 2), 128, dtype=np.uint8))
        self.assertEqual(load_array(path).dtype, np.uint8)
        other = os.path.join(self.temp_dir, "a.bin")
        with open(other, "wb") as f:
            f.write(b"nothing")
        with self.assertRaises(FormatError):
            load_array(other)

    def test_json(self):
        path = os.path.join(self.temp_dir, "s.json")
        save_json(path, {"b": 1, "a": [1, 2]})
        self.assertEqual(load_json(path), {"a": [1, 2], "b": 1})
        with open(path, "w", encoding="utf-8") as f:
            f.write("{broken")
        with self.assertRaises(FormatError):
            load_json(path)


class TestStreams(unittest.TestCase):
    """Named random streams"""

    def test_same_name_same_draws(self):
        np.testing.assert_array_equal(named_stream(3, "a").integers(0, 1000, 10),
                                      named_stream(3, "a").integers(0, 1000, 10))

    def test_names_independent(self):
        self.assertFalse(np.array_equal(named_stream(3, "a").integers(0, 1000, 10),
                                        named_stream(3, "b").integers(0, 1000, 10)))

    def test_registry_state_roundtrip(self):
        registry = StreamRegistry(5)
        registry.get("x").uniform(size=7)
        state = registry.state_dict()
        expected = registry.get("x").uniform(size=3)
        restored = StreamRegistry(5)
        restored.load_state_dict(state)
        np.testing.assert_array_equal(restored.get("x").uniform(size=3), expected)


if __name__ == '__main__':
    unittest.main()
