import torch


def fd_check(loss_fn, module, n_coords=200, eps=1e-6, rtol=1e-4, atol=1e-10, seed=0):
    """Fraction of sampled weight coordinates whose autograd gradient matches
    a central finite difference of ``loss_fn()`` within ``rtol``."""
    params = [p for p in module.parameters() if p.requires_grad]
    module.zero_grad()
    loss_fn().backward()
    grads = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
             for p in params]
    sizes = torch.tensor([p.numel() for p in params])
    total = int(sizes.sum())
    g = torch.Generator().manual_seed(seed)
    picks = torch.randperm(total, generator=g)[:n_coords].tolist()
    offsets = torch.cumsum(sizes, 0) - sizes
    ok = 0
    with torch.no_grad():
        for flat in picks:
            i = int(torch.searchsorted(offsets, flat, right=True)) - 1
            j = flat - int(offsets[i])
            p = params[i].view(-1)
            orig = p[j].item()
            p[j] = orig + eps
            up = loss_fn().item()
            p[j] = orig - eps
            down = loss_fn().item()
            p[j] = orig
            fd = (up - down) / (2 * eps)
            an = grads[i].view(-1)[j].item()
            if abs(fd - an) <= rtol * max(abs(fd), abs(an)) + atol:
                ok += 1
    return ok / len(picks)


def tiny_config(seed=0, epochs=2, seeds=(0,), modes=("autoregressive", "parallel")):
    """Experiment config small enough to run the whole pipeline in seconds."""
    opt = {"epochs": epochs, "batch_size": 4, "lr": 1e-3}
    return {
        "version": 1,
        "seed": seed,
        "dataset": {
            "simulator": {"grid": {"nx": 16, "ny": 16, "dx": 1 / 16, "dy": 1 / 16,
                                   "dt": 0.02, "nt": 8},
                          "n_substeps": 10},
            "split": {"n_train": 6, "n_val": 2, "n_test_id": 2, "n_test_ood": 2},
        },
        "stage1": {"encoder": {"channels": [4], "downsample_factors": [2], "norm_groups": 2},
                   "codebook_size": 8,
                   "evolution": {"n_levels": 1, "fourier_modes": 1, "spectral_channels": 4},
                   "optimizer": opt},
        "stage2": {"schedule": {"n_steps": 10}, "d_env": 8, "env_width": 8, "d_time": 8,
                   "hidden": 8, "n_res_blocks": 1, "optimizer": opt},
        "eval": {"modes": list(modes), "seeds": list(seeds)},
    }
