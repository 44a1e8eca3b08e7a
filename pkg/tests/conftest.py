import numpy as np

from bdpg import ndmath as nd
from bdpg.ndmath import ParamStore
from bdpg.return_model import LOG_STD_MIN, ReturnModel, ReturnModelConfig


def coincident_model(seed: int = 0, disc_hidden=(16,)) -> ReturnModel:
    """Linear prior/encoder/generator wired so both joints are (u, u), u ~ N(0, 1).

    prior: z ~ N(0, 1); generator: x~ = z; encoder: z~ = x with the minimum std.
    Fed data x ~ N(0, 1), the encoder joint (x, z~) and the prior joint (x~, z)
    coincide up to the 1e-6 encoder noise. Only the discriminator has a hidden layer.
    """
    store = ParamStore(seed=seed, dtype=np.float64)
    sizes = [3, *disc_hidden, 1]
    nd.init_mlp(store, "disc", sizes)
    model = ReturnModel(ReturnModelConfig(state_dim=1, latent_dim=1, hidden=()), store,
                        zero_last=True)
    model.specs["disc"] = nd.MLPSpec(sizes, "tanh")
    store.values["enc.W0"][0, 0] = 1.0            # mean <- x
    store.values["enc.b0"][1] = LOG_STD_MIN        # log_std at the clamp floor
    store.values["gen.W0"][0, 0] = 1.0             # x~ <- z
    return model


def train_discriminator(model: ReturnModel, steps: int, batch: int = 256, lr: float = 1e-2,
                        seed: int = 0, data=None) -> float:
    """Ascend the discriminator objective alone; returns the final mean score
    over both joints on a fresh evaluation batch."""
    rng = np.random.default_rng(seed)
    data = data or (lambda n: rng.standard_normal(n))
    names = model.groups["disc"]
    s = np.ones((batch, 1))
    for _ in range(steps):
        x = data(batch)
        e1, e2 = rng.standard_normal((batch, 1)), rng.standard_normal((batch, 1))
        tape = nd.Tape()
        with tape:
            obj = model.discriminator_loss(x, s, e1, e2, tape)
            loss = nd.neg(obj)
        nd.backward(tape, loss, model.store)
        nd.adam_step(model.store, names, lr)
    n = 20_000
    x = data(n)
    s = np.ones((n, 1))
    z_enc, _ = model.encode(x, s, rng)
    z_pri, g = model.sample_return(s, rng)
    return float(np.mean(np.concatenate([model.discriminator_score(x, z_enc.z, s),
                                         model.discriminator_score(g, z_pri.z, s)])))
