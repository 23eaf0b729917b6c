"""Where sampling breaks: inflate the latent until the inverse overflows and
see which layer fails first. Then search per-pixel temperatures on one image."""
import torch

from srprior.data import make_toy_images, resample, to_tensor
from srprior.metrics import inf_rate
from srprior.temperature import best_temperature_map, render_map
from srprior.training import TrainConfig, train_flow

torch.set_num_threads(1)

flow = train_flow(TrainConfig(phase="flow", model="fixed", epochs=20, batch_size=8, lr0=1e-3),
                  make_toy_images(32, 40, seed=1)).model
hr = make_toy_images(30, 32, seed=5)
x, y = to_tensor([resample(i, (8, 8)) for i in hr]), to_tensor(hr)

for scale in (1, 10, 100, 1e4):
    _, diags = flow.sample_or_diagnose(x, 1.0, seed=0, latent_scale=scale)
    layers = sorted({d.first_bad_layer for d in diags if d.nonfinite})
    print(f"latent x{scale:g}: %Inf {inf_rate([d.nonfinite for d in diags]):5.1f}  first bad layers {layers}")

res = best_temperature_map(flow, x[:1], y[:1], seed=0)
tau = res.temp_map.tau
print(f"tau map over {len(res.generations)} generations: mean {tau.mean():.2f}, "
      f"range [{tau.min():.2f}, {tau.max():.2f}]")
print("assembled error", float(res.error.mean()), "best single tau",
      min(float(e.mean()) for e in res.error_stack))
print("rendered map", render_map(tau).shape, "assembled", res.assembled.shape)
