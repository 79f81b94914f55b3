"""Smoke test for the Python bindings: a tiny train, certify and shield run."""

import os
import tempfile

import shield

TINY = """
[train]
horizon = 20
iterations = 5
hidden = 8
batch_size = 2

[recovery]
t_prime = 20
samples = 16
select_every = 2
select_states = 8

[recovery.train]
horizon = 20
iterations = 4
hidden = 8
batch_size = 2
"""


def main():
    env = shield.Environment("cartpole", "modified")
    assert (env.state_dim, env.action_dim) == (4, 1)
    assert env.is_safe([0.0, 0.0, 0.1, 0.0])
    assert not env.is_safe([0.0, 0.0, 0.2, 0.0])
    assert env.step([0.0] * 4, [0.0]) == [0.0] * 4

    cache = shield.CertificateCache()
    eps = cache.epsilon(env, [1.5, 0.0, 0.0, 0.0])
    assert eps is not None and eps > 0.0
    assert shield.is_stable(env, [1.5, 0.0, 0.0, 0.0], cache)

    pi_hat, pi_rec = shield.train_policies("cartpole", TINY, cache)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "pi_hat.txt")
        pi_hat.save(path)
        assert shield.MlpPolicy.load(path).params() == pi_hat.params()

    x0 = [0.0, 0.0, 0.0, 0.0]
    ok, first = shield.is_recoverable(env, pi_rec, x0, cache, horizon=10)
    assert ok and first == 0

    log = shield.run_with_shield(env, pi_hat, pi_rec, x0, 50, cache, horizon=10)
    assert len(log["states"]) == 51 and len(log["branches"]) == 50
    assert all(log["safe"])
    assert set(log["branches"]) <= {"learned", "lqr", "recovery"}

    bicycle = shield.Environment("bicycle", obstacle_seed=3)
    assert len(bicycle.obstacles()) == 2

    try:
        shield.Environment("pendulum")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown environment accepted")

    print("smoke test passed:", dict((b, log["branches"].count(b)) for b in sorted(set(log["branches"]))))


if __name__ == "__main__":
    main()
