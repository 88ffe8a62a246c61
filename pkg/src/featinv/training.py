"""Rebuild the packaged model assets from scratch.

    python -m featinv.training [--out DIR]

Produces ``toy_cnn_v1.zip`` (target classifier) and ``toy_decoder_v1.zip``
(autoencoder decoder + encoder). Both record their training seed and final
metrics in the archive metadata.
"""

import argparse
import logging
import time
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import CLASSES, make_shapes
from .io import save_archive, state_dict_arrays
from .metrics import psnr
from .priors import HashTextEncoder, ToyDecoder, ToyDecoderPrior, ToyEncoder, normalize_latent
from .splitnet import seeded, set_deterministic, toy_cnn

log = logging.getLogger(__name__)

CNN_SEED = 1
DECODER_SEED = 2


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i : i + batch_size]


def train_toy_cnn(n_train=4096, epochs=15, batch_size=64, lr=2e-3, seed=CNN_SEED):
    x, y, _ = make_shapes(n_train, seed=100 + seed)
    xt, yt, _ = make_shapes(1024, seed=200 + seed)
    x, y = torch.from_numpy(x), torch.from_numpy(y)
    with seeded(seed):
        model = toy_cnn()
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        model.train()
        for idx in _batches(n_train, batch_size, rng):
            loss = F.cross_entropy(model(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        model.eval()
        with torch.no_grad():
            acc = (model(torch.from_numpy(xt)).argmax(1).numpy() == yt).mean()
        log.info("toy_cnn epoch %d loss %.4f test acc %.4f", epoch, loss.item(), acc)
    meta = {"model": "toy_cnn", "seed": seed, "epochs": epochs, "n_train": n_train, "test_accuracy": float(acc)}
    return model, meta


def train_toy_decoder(n_train=8192, epochs=30, batch_size=64, lr=2e-3, seed=DECODER_SEED, text_dropout=0.5):
    x, _, captions = make_shapes(n_train, seed=300 + seed)
    xt, _, _ = make_shapes(512, seed=400 + seed)
    enc_text = HashTextEncoder()
    table = {c: enc_text(c) for c in CLASSES}
    emb = torch.stack([table[c] for c in captions])
    x = torch.from_numpy(x)
    with seeded(seed):
        encoder, decoder = ToyEncoder(), ToyDecoder()
    params = list(encoder.parameters()) + list(decoder.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=epochs)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    for epoch in range(epochs):
        encoder.train()
        decoder.train()
        for idx in _batches(n_train, batch_size, rng):
            xb = x[idx]
            keep = (torch.rand(len(idx), 1, generator=gen) >= text_dropout).float()
            v = normalize_latent(encoder(xb), batched=True)
            loss = F.mse_loss(decoder(v, emb[idx] * keep), xb)
            opt.zero_grad()
            loss.backward()
            opt.step()
        sched.step()
        decoder.eval()
        encoder.eval()
        with torch.no_grad():
            rec = decoder(normalize_latent(encoder(torch.from_numpy(xt)), batched=True))
        score = float(np.mean([psnr(a * 255, b * 255) for a, b in zip(xt, rec.numpy())]))
        log.info("toy_decoder epoch %d loss %.5f held-out psnr %.2f", epoch, loss.item(), score)
    meta = {
        "seed": seed,
        "epochs": epochs,
        "n_train": n_train,
        "text_dropout": text_dropout,
        "text_encoder": enc_text.name,
        "heldout_psnr": score,
    }
    return ToyDecoderPrior(decoder, meta=meta), encoder, meta


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=Path(__file__).parent / "assets")
    parser.add_argument("--only", choices=["cnn", "decoder"])
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    set_deterministic(True)
    args.out.mkdir(parents=True, exist_ok=True)
    if args.only in (None, "cnn"):
        t0 = time.time()
        model, meta = train_toy_cnn()
        meta["train_seconds"] = round(time.time() - t0, 1)
        save_archive(args.out / "toy_cnn_v1.zip", "target_model", state_dict_arrays(model), meta)
    if args.only in (None, "decoder"):
        t0 = time.time()
        prior, encoder, meta = train_toy_decoder()
        meta["train_seconds"] = round(time.time() - t0, 1)
        prior.save(args.out / "toy_decoder_v1.zip", encoder=encoder, meta=meta)


if __name__ == "__main__":
    main()
