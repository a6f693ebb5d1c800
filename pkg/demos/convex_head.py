"""Train a linear head on clustered synthetic features with FGN, SGN and Adam.

Same data, seed, batches and step budget for every method; prints the
training loss at a few evaluation points and the final accuracy.
"""
from fastgn.affine import accuracy
from fastgn.cache import make_features
from fastgn.optim import OptimizerConfig, train

data = make_features(2000, 32, 20, seed=0, mode="clustered", noise=1.0, radius=2.0)

logs = {}
for method in ("fgn", "sgn", "adam"):
    logs[method] = train(data, 20, OptimizerConfig(method), epochs=30, batch_size=128, eval_every=80)

steps = logs["fgn"].column("step")
print(f"{'step':>6s}" + "".join(f"{m:>10s}" for m in logs))
for i, s in enumerate(steps):
    print(f"{int(s):6d}" + "".join(f"{logs[m].column('train_loss')[i]:10.4f}" for m in logs))
print()
for m, log in logs.items():
    print(f"{m:5s} accuracy {accuracy(log.params, data):.3f}  time in steps {log.records[-1].wall_seconds:.2f}s")
