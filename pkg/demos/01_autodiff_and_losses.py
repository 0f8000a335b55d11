"""Walk through the differentiation core: tensors, tapes, gradient checks,
and the contrastive losses against their brute-force references."""
import numpy as np

import fedstyle.autodiff as ad
from fedstyle import gradcheck, losses, oracles

print("== tensors and tapes ==")
x = ad.parameter([-1.0, 2.0])
with ad.record():
    y = ad.sum(ad.relu(x))
    ad.backward(y)
print(f"relu([-1, 2]) -> {ad.relu(x).data},  d sum(relu(x))/dx -> {x.grad}")

print("\n== two SGD steps on f(p) = p^2 from p=1, lr=0.1 ==")
p = ad.parameter(1.0)
for step in range(2):
    with ad.record():
        ad.backward(ad.mul(p, p))
    ad.sgd_step([p], lr=0.1)
    print(f"step {step + 1}: p = {float(p.data):.4f}")

print("\n== finite-difference gradient checks over every op ==")
results = gradcheck.run_all(instances=3, verbose=True)
print(f"all passed: {all(r.passed for r in results)}")

print("\n== NT-Xent vs a brute-force double sum ==")
rng = np.random.default_rng(0)
for b in (1, 2, 4):
    z1, z2 = rng.standard_normal((2, b, 8))
    got = float(losses.nt_xent(z1, z2, tau=0.07).data)
    ref = oracles.nt_xent_reference(z1, z2, tau=0.07)
    print(f"B={b}: loss {got:.6f}, reference {ref:.6f}, |err| {abs(got - ref):.2e}")

print("\n== supervised style InfoNCE: B=1 has no positives ==")
z = rng.standard_normal((2, 8))
print(f"loss with one original + one Sobel view: {float(losses.style_infonce(z, [0, 1], 0.07).data)}")

print("\n== SimSiam loss with stop-gradient ==")
z = rng.standard_normal((4, 8))
print(f"perfectly aligned p = z gives {float(losses.simsiam_loss(z, z, z, z).data):.1f}")
