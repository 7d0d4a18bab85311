"""
Checking the hand-written gradients
===================================

Every parameter group of a small float64 model is compared against central
finite differences. Dropout stays on with a fixed mask, so its backward
pass is exercised too.
"""
from csrs.gradcheck import check_gradients, random_instance

model, batch, rng = random_instance(seed=0)
print("parameter groups:", len(model.params))

worst = check_gradients(model, batch, rng, entries=8, h=1e-5)
for name, err in sorted(worst.items(), key=lambda kv: -kv[1])[:10]:
    print(f"{name:<22} {err:.2e}")
print("largest relative error:", f"{max(worst.values()):.2e}")
