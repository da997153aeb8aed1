"""Check the tape against central differences, and count simulations.

For the identification loss the tape gives dL/dH from one simulation.  A
central difference needs two perturbed runs per parameter.  For six
stabiliser parameters that is one simulation against six (two-lane) ones.

Run:  python3 demos/06_gradient_check.py
"""

import numpy as np

from adpower import (RUN_COUNTER, EventSchedule, LossSpec, Tape, apply_params, fd_gradient,
                     load_system, loss_mse, resolve_param, run)

DT = 0.005
fault = EventSchedule.short_circuit(0, 1.0, 1.05)

model = load_system("builtin:kundur_smib")
H = resolve_param(model, "G1.H")
target = run(model, fault, 10.0, DT).values("G1.speed")[:, 0]

points = np.array([2.5, 5.0, 9.0])
tape = Tape(points.size)
h = tape.var(points)
loss = loss_mse(run(apply_params(model, {H: h}), fault, 10.0, DT).signal("G1.speed"), target)
ad = tape.backward(loss)[h]


def evaluate(vals):
    return loss_mse(run(apply_params(model, {H: vals["H"]}), fault, 10.0, DT).values("G1.speed"),
                    target[:, None])


print("dL/dH: tape vs central difference")
for p, g in zip(points, ad):
    fd = fd_gradient(evaluate, {"H": p})["H"]
    print(f"  H = {p:4.1f} s: {g:+.8e}  {fd:+.8e}  rel. diff {abs(g - fd) / abs(fd):.1e}")

pss_model = load_system("builtin:kundur_smib_pss")
names = ["K", "T_w", "T_1", "T_3", "T_2", "T_4"]
refs = [resolve_param(pss_model, f"G1.pss.{n}") for n in names]
mae = LossSpec("mae", "G1.speed", window=(1.0, 10.0))

before = RUN_COUNTER.count
tape = Tape(1)
leaves = [tape.var(r.get(pss_model)) for r in refs]
loss = mae(run(apply_params(pss_model, dict(zip(refs, leaves))), fault, 10.0, DT))
grads = tape.backward(loss)
print(f"\nsix stabiliser gradients from {RUN_COUNTER.count - before} simulation:")
for n, leaf in zip(names, leaves):
    print(f"  dL/d{n:4s} = {grads[leaf][0]:+.4e}")

before = RUN_COUNTER.count
fd_gradient(lambda v: np.asarray(mae(run(apply_params(pss_model, {r: v[n] for r, n in zip(refs, names)}),
                                         fault, 10.0, DT))),
            {n: r.get(pss_model) for n, r in zip(names, refs)})
print(f"the same by central differences: {RUN_COUNTER.count - before} simulations")
