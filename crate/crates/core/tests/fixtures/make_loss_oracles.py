"""Hand-summed loss values on tiny inputs (one scale, one feature layer).

Plain loops over Python floats only. The toy critic used with these values
returns its input as the single feature map and sigmoid(input) as the
per-element real probability; the toy perceptual net returns its input as
the single layer.
"""
import json
import math

fake_score = [0.2, 0.7, 0.4, 0.9]
real_score = [0.6, 0.8, 0.3, 0.95]

recon = [0.1 * k for k in range(48)]
orig = [0.05 * k * k % 1.7 for k in range(48)]

x = [((7 * k) % 11) / 10 for k in range(12)]
x_syn = [((5 * k + 3) % 13) / 12 for k in range(12)]
margin = 0.1

fake = [((3 * k + 1) % 7) / 3 - 1 for k in range(12)]
real = [((2 * k + 5) % 9) / 4 - 1 for k in range(12)]
fake_mask = [1, 1, 0, 2]
real_mask = [1, 0, 2, 2]
components = [1, 2]


def mean(v):
    total = 0.0
    for a in v:
        total += a
    return total / len(v)


def extract(img, mask, label):
    # img is channel-major [3, 2, 2]
    out = []
    for c in range(3):
        for p in range(4):
            out.append(img[4 * c + p] if mask[p] == label else 0.0)
    return out


def sigmoid(a):
    return 1.0 / (1.0 + math.exp(-a))


gen = mean([math.log(1 - s) for s in fake_score])
disc = mean([math.log(s) for s in real_score]) + gen
cyc = mean([abs(a - b) for a, b in zip(recon, orig)])
vgg = max(0.0, mean([abs(a - b) for a, b in zip(x_syn, x)]) - margin)

comp_gen = 0.0
comp_real = 0.0
fm = 0.0
for label in components:
    f = extract(fake, fake_mask, label)
    r = extract(real, real_mask, label)
    comp_gen += mean([math.log(1 - sigmoid(a)) for a in f])
    comp_real += mean([math.log(sigmoid(a)) for a in r])
    fm += mean([abs(a - b) for a, b in zip(r, f)])
n = len(components)

fixture = {
    "inputs": {
        "fake_score": fake_score,
        "real_score": real_score,
        "recon": recon,
        "orig": orig,
        "x": x,
        "x_syn": x_syn,
        "margin": margin,
        "fake": fake,
        "real": real,
        "fake_mask": fake_mask,
        "real_mask": real_mask,
        "components": components,
    },
    "expected": {
        "adv_loss_generator": gen,
        "adv_loss_discriminator": disc,
        "cycle_loss": cyc,
        "vgg_margin_loss": vgg,
        "component_adv_generator": comp_gen / n,
        "component_adv_real": comp_real / n,
        "fm_loss_cross_identity": fm / n,
    },
}
with open("loss_oracles.json", "w") as fh:
    json.dump(fixture, fh, indent=2)
    fh.write("\n")
