"""Byte-level fixtures built without the package's own writers."""

import struct

import numpy as np

# 4 images of 2x2 grayscale pixels, hand-chosen
IDX_PIXELS = np.array(
    [
        [[0, 255], [128, 1]],
        [[10, 20], [30, 40]],
        [[255, 255], [0, 0]],
        [[7, 77], [177, 254]],
    ],
    dtype=np.uint8,
)
IDX_LABELS = np.array([3, 0, 9, 1], dtype=np.uint8)


def idx_images_bytes(pixels=IDX_PIXELS):
    n, h, w = pixels.shape
    return b"\x00\x00\x08\x03" + struct.pack(">III", n, h, w) + pixels.tobytes()


def idx_labels_bytes(labels=IDX_LABELS):
    return b"\x00\x00\x08\x01" + struct.pack(">I", len(labels)) + labels.tobytes()


def cifar_record(label, seed):
    """One 3073-byte record: label byte, then R, G, B 32x32 planes, row-major."""
    pix = np.random.default_rng(seed).integers(0, 256, (3, 32, 32), dtype=np.uint8)
    return bytes([label]) + pix[0].tobytes() + pix[1].tobytes() + pix[2].tobytes(), pix


def write_cifar_dir(directory, n_per_batch=3):
    """Five training batches plus the test batch; returns expected train pixels and labels."""
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]
    expected = {}
    for b, name in enumerate(names):
        blob, pixels, labels = b"", [], []
        for r in range(n_per_batch):
            label = (b * n_per_batch + r) % 10
            rec, pix = cifar_record(label, seed=b * 100 + r)
            blob += rec
            pixels.append(pix)
            labels.append(label)
        (directory / name).write_bytes(blob)
        expected[name] = (np.stack(pixels), np.array(labels))
    return expected
