"""Produce the committed toy backbone fixture.

Runs the seeded pretraining loop on the synthetic byte corpus, casts the
weights to float32, and writes the checkpoint that ships inside the
package. Rerunning reproduces the file bit-for-bit.

Usage: python scripts/pretrain_backbone.py [--steps N] [--seed S] [--out PATH]
"""

import argparse
from pathlib import Path

import numpy as np
import torch

from alarm.backbone import (
    BackboneConfig,
    ByteTokenizer,
    CausalBackbone,
    freeze_fingerprint,
    pretrain_toy_backbone,
)
from alarm.checkpoint import arrays_to_state, load_arrays, save_arrays, state_to_arrays

DEFAULT_OUT = Path(__file__).resolve().parent.parent / "src" / "alarm" / "assets" / "toy_backbone.ckpt"


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--steps", type=int, default=600)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=Path, default=DEFAULT_OUT)
    args = parser.parse_args()

    config = BackboneConfig()
    model, final_loss = pretrain_toy_backbone(config, seed=args.seed, steps=args.steps)
    print(f"pretraining finished: final batch loss {final_loss:.4f}")

    arrays = {
        name: arr.astype(np.float32) for name, arr in state_to_arrays(model).items()
    }
    args.out.parent.mkdir(parents=True, exist_ok=True)

    # Fingerprint the model as consumers will see it: after the float32
    # round trip, upcast back to float64.
    reloaded = CausalBackbone(config, generator=torch.Generator().manual_seed(0))
    arrays_to_state(reloaded, arrays)
    fingerprint = freeze_fingerprint(reloaded)

    save_arrays(
        args.out,
        arrays,
        metadata={
            "kind": "backbone",
            "config": config.to_dict(),
            "pretrain": {"seed": args.seed, "steps": args.steps,
                         "final_loss": round(final_loss, 6)},
            "fingerprint": fingerprint,
            "step": args.steps,
        },
    )
    size_kb = args.out.stat().st_size / 1024
    print(f"wrote {args.out} ({size_kb:.0f} KiB), fingerprint {fingerprint[:16]}…")

    arrays2, metadata = load_arrays(args.out)
    check = CausalBackbone(BackboneConfig.from_dict(metadata["config"]),
                           generator=torch.Generator().manual_seed(0))
    arrays_to_state(check, arrays2)
    assert freeze_fingerprint(check) == fingerprint, "round-trip fingerprint mismatch"

    tokenizer = ByteTokenizer()
    prefix = check.embed_tokens(tokenizer.encode("the dog "))
    continuation = tokenizer.decode(check.generate(prefix, 24))
    print(f"sample continuation: {'the dog ' + continuation!r}")


if __name__ == "__main__":
    main()
