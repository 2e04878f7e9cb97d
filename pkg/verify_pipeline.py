import tempfile
from pathlib import Path

from biasguard.checkpoint import load_checkpoint, save_checkpoint
from biasguard.data import SynthConfig, make_splits, synth_gzsl
from biasguard.model import ModelConfig
from biasguard.pipeline import TrainConfig, evaluate, train

# Tiny run: synthesise, train one epoch, round-trip the checkpoint, evaluate
dataset = make_splits(synth_gzsl(SynthConfig(n_classes=5, n_unseen=2, samples_per_class=10,
                                             d_visual=8, k_semantic=4, seed=1)), seed=1)
cfg = TrainConfig(model=ModelConfig(d_visual=8, k_semantic=4, d_latent=3, k_proj=5), epochs=1, batch_size=8)

print("Training...")
checkpoint = train(cfg, dataset)
print("Loss history:", {k: v for k, v in checkpoint.history.items() if k != "batch_total"})

with tempfile.TemporaryDirectory() as tmp:
    path = save_checkpoint(checkpoint, Path(tmp) / "verify.ckpt")
    report = evaluate(dataset, load_checkpoint(path))

print(f"U={report.u:.1f} S={report.s:.1f} H={report.h:.1f}")
print("Round trip matches:", report == evaluate(dataset, checkpoint))
