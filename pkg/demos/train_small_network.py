"""Training the compact normal network on freshly sampled observation maps.

This is a few-minute version of the desk-scale training run: Lambertian
surfaces without global illumination, 20k records, a handful of epochs. It
prints the held-out angular error after every epoch and compares the result
with the closed-form Lambertian solver on the same records, then saves a
checkpoint usable as ``--regressor net:demo.ckpt`` on the command line.

Run:  python3 demos/train_small_network.py [records]
"""
import sys

import numpy as np

from nearps.obsmap import ObservationMap
from nearps.regressor import LambertianRegressor, angular_loss
from nearps.regressor.network import CompactNet, save_checkpoint
from nearps.regressor.training import bank_from_stream, evaluate_mae, train
from nearps.sampler import PerturbationSpec, SamplerOptions, record_stream


def main(n_records=20000):
    options = SamplerOptions(materials="lambertian", global_illumination=False)
    spec = PerturbationSpec.zero()
    bank = bank_from_stream(record_stream(0, "general", spec, options), n_records)
    held_out = list(record_stream(1, "general", spec, options, count=1000))
    val = bank_from_stream(iter(held_out), len(held_out))

    net = CompactNet(seed=0)
    print(f"{net.n_params} parameters, {len(bank)} training records")
    steps = 4 * (n_records // 256)
    result = train(net, bank, steps, 256, seed=0, steps_per_epoch=max(1, steps // 8),
                   val_bank=val, log=print)
    print(f"trained in {result.seconds:.0f} s; held-out MAE {evaluate_mae(net, val):.2f} deg")

    maps = ObservationMap(np.stack([r.map.rgb for r in held_out]),
                          np.stack([r.map.view_vector for r in held_out]),
                          np.stack([r.map.occupancy for r in held_out]),
                          np.stack([r.map.light_dirs for r in held_out]))
    targets = np.stack([r.target for r in held_out])
    lamb = np.degrees(angular_loss(LambertianRegressor().predict_batch(maps), targets).mean())
    print(f"closed-form Lambertian solver on the same records: {lamb:.2f} deg")
    save_checkpoint(net, "demo.ckpt")
    print("checkpoint written to demo.ckpt")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 20000)
