"""Dev helper: evaluate a checkpoint against the criterion-7 scenario battery."""
import sys
import numpy as np

from droopguard.agent.train import Trainer
from droopguard.env import GridEnv
from droopguard.runner import greedy_policy, null_policy, run_episode
from droopguard.scenario import ScenarioConfig, load_config


def y_span(env, a, b):
    y = np.stack(env.log["y"][1:])
    ub = env.scenario.unit_bus[env.u_idx]
    return float(y[a:b, ub].mean())


def main(ckpt):
    config = load_config("train_default")
    trainer = Trainer.from_checkpoint(ckpt, config)
    period = config.agent_period
    base_fields = {f: getattr(config, f) for f in config.__dataclass_fields__}
    oks, recs = [], []
    for i in range(20):
        f = 0.15 + 0.35 * i / 19.0
        cfg = ScenarioConfig(**{**base_fields,
                                "attack_fraction_range": (f, f),
                                "attack_window": "200,450",
                                "rng_seed": 1000 + i})
        eb = GridEnv(cfg)
        eb, _ = run_episode(cfg, null_policy(eb.space), seed=cfg.rng_seed, per_unit=True, env=eb)
        ep = GridEnv(cfg)
        ep, sm = run_episode(cfg, greedy_policy(trainer, ep.space), seed=cfg.rng_seed,
                             per_unit=True, env=ep)
        w_a = sm["first_action_window"]
        t_a = (w_a * period) if w_a is not None else ep.scenario.attack_start + period
        t_a = max(t_a, ep.scenario.attack_start)
        yb, yp = y_span(eb, t_a, 450), y_span(ep, t_a, 450)
        ok = yp <= 0.2 * yb or yp <= 0.05
        rec = sm["windows_to_null_after_attack"]
        oks.append(ok)
        recs.append(rec is not None and rec <= 3)
        print("f=%.3f yb=%9.3f yp=%9.3f %s rec=%s curt=%.3f first_w=%s"
              % (f, yb, yp, "ok " if ok else "MISS", rec,
                 sm["curtailment_energy_pu_s"], w_a))
    cfg9 = load_config("eval_20pct_9am")
    eb = GridEnv(cfg9)
    eb, _ = run_episode(cfg9, null_policy(eb.space), seed=cfg9.rng_seed, per_unit=True, env=eb)
    ep = GridEnv(cfg9)
    ep, sm9 = run_episode(cfg9, greedy_policy(trainer, ep.space), seed=cfg9.rng_seed,
                          per_unit=True, env=ep)
    t_a = ep.scenario.attack_start + period
    red9 = 1.0 - y_span(ep, t_a, 450) / max(y_span(eb, t_a, 450), 1e-15)
    print("7a: %d/20   7c: %d/20   morning red %.2f curt %.4f"
          % (sum(oks), sum(recs), red9, sm9["curtailment_energy_pu_s"]))


if __name__ == "__main__":
    main(sys.argv[1])
