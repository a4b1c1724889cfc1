"""Desk experiment: train a toy model, compare fMVAE vs ILRMA SDR on scenes.

Development aid, not part of the test suite.
"""

import sys
import time

import numpy as np
import torch

from fastsep.evaluation import bss_eval, classification_accuracy
from fastsep.neural import load_bundle
from fastsep.roomsim import RoomSpec, make_scene, toy_corpus
from fastsep.separation import back_project, demix, fmvae_separate, ilrma_separate
from fastsep.signal_io import Spectrogram, istft, stft_stack
from fastsep_trainer.train import TrainingConfig, train_acvae, held_out_accuracy
from fastsep_trainer.data import spectrogram_set

FS = 16000
WIN, HOP = 2048, 1024
CLASSES = 4

def main(epochs=60, hidden=24, clf_hidden=16, n_scenes=6, utt_train=16, seed=0):
    t0 = time.time()
    train_corpus = toy_corpus(CLASSES, utt_train, 4.0, seed=1000, sample_rate=FS)
    pairs = [(w.channel(0), lab) for w, lab in train_corpus]
    config = TrainingConfig(
        corpus=pairs, class_count=CLASSES, out="/tmp/toy_exp.fmv",
        hidden=hidden, classifier_hidden=clf_hidden,
        epochs=epochs, window_length=WIN, frame_shift=HOP, seed=seed,
    )
    path, curve = train_acvae(config)
    print(f"trained in {time.time()-t0:.0f}s; final elbo {curve[-1]['elbo']:.1f} "
          f"ce {curve[-1]['label_ll']:.3f}", flush=True)

    held = toy_corpus(CLASSES, 6, 4.0, seed=2000, sample_rate=FS)
    held_set = spectrogram_set([(w.channel(0), l) for w, l in held], CLASSES, WIN, HOP)
    from fastsep_trainer.networks import import_bundle
    nets = import_bundle(path)
    print("held-out classifier accuracy:", held_out_accuracy(nets, held_set), flush=True)

    bundle = load_bundle(path)
    spec = RoomSpec.for_rt60(0.078, FS)
    rng = np.random.default_rng(123)
    wins = 0
    accs = []
    for sc in range(n_scenes):
        classes = rng.choice(CLASSES, size=2, replace=False)
        scene_seed = 3000 + sc
        sources = [
            toy_corpus(CLASSES, 1, 5.0, seed=scene_seed + 17 * int(c))[int(c)][0]
            for c in classes
        ]
        scene = make_scene(spec, sources, [int(c) for c in classes],
                           seed=scene_seed, position_jitter=0.08)
        X = stft_stack(scene.mixture, WIN, HOP)
        refs = [img.channel(0) for img in scene.source_images]

        st_i, _, _ = ilrma_separate(X, 2, 100, seed=sc)
        est_i = _estimates(st_i, X, scene.mixture.n_samples)
        sc_i = bss_eval(est_i, refs)

        init, _, _ = ilrma_separate(X, 2, 30, seed=sc)
        sc_0 = bss_eval(_estimates(init, X, scene.mixture.n_samples), refs)
        st_f, _, tr_f = fmvae_separate(X, bundle, init, 40)
        est_f = _estimates(st_f, X, scene.mixture.n_samples)
        sc_f = bss_eval(est_f, refs)
        acc = classification_accuracy(tr_f, scene.labels, "all", sc_f.permutation)
        accs.append(acc)

        win = sc_f.sdr.mean() > sc_i.sdr.mean()
        wins += int(win)
        print(f"scene {sc} classes {list(map(int, classes))}: "
              f"ILRMA SDR {sc_i.sdr.mean():6.2f}  init30 {sc_0.sdr.mean():6.2f}  "
              f"fMVAE SDR {sc_f.sdr.mean():6.2f}  "
              f"acc {acc:.2f}  {'WIN' if win else 'LOSS'}", flush=True)
    print(f"wins: {wins}/{n_scenes}  mean acc {np.mean(accs):.3f}  "
          f"total {time.time()-t0:.0f}s")


def _estimates(stack, X, n_samples):
    Y = demix(stack.matrices, X)
    proj = back_project(Y, stack, X)
    return [istft(Spectrogram(proj[j], HOP, WIN, FS), n_samples) for j in range(2)]


if __name__ == "__main__":
    kwargs = {}
    for arg in sys.argv[1:]:
        key, _, value = arg.partition("=")
        kwargs[key] = int(value)
    main(**kwargs)
