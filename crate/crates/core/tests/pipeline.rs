use rand::Rng;

use moc_core::curricula::{gen_init_state, gen_subgoals, BaseRnn, PotentialFn};
use moc_core::envs::{env_reset_seeded, env_step, EnvSpec, Task, STATE_DIM};
use moc_core::hypernet::{CellKind, HyperConfig, HyperNet, HyperState, Role};
use moc_core::memory::{attend_tape, write_tape, MemoryMatrix};
use moc_core::rng::{stream, Stream};
use moc_core::tape::Tape;
use moc_core::trainer::{NullObserver, TrainConfig, Trainer, Variant};

fn small(variant: Variant, seed: u64) -> TrainConfig {
    TrainConfig {
        variant,
        seed,
        n_steps: 200,
        outer_episodes: 2,
        hidden: vec![16],
        ..TrainConfig::default()
    }
}

#[test]
fn tape_memory_write_matches_plain_write() {
    let mut r = stream(11, Stream::Memory);
    let mut m = MemoryMatrix::init(5, 6, &mut r);
    let key: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
    let m_e: Vec<f64> = (0..6).map(|_| r.random_range(0.0..1.0)).collect();
    let m_a: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();

    let mut t = Tape::<f64>::new();
    let mv = t.constant_f64(5, 6, m.data());
    let kv = t.constant_f64(1, 6, &key);
    let ev = t.constant_f64(1, 6, &m_e);
    let av = t.constant_f64(1, 6, &m_a);
    let alpha = attend_tape(&mut t, mv, kv);
    let written = write_tape(&mut t, mv, alpha, ev, av);

    let a = m.attend(&key);
    assert!(a.alpha.iter().zip(t.values_f64(alpha)).all(|(x, y)| (x - y).abs() < 1e-12));
    m.write_with(&a, &m_e, &m_a);
    assert!(m.data().iter().zip(t.values_f64(written)).all(|(x, y)| (x - y).abs() < 1e-12));
    assert_eq!(m.writes(), 1);
}

#[test]
fn generated_curricula_stay_in_the_arena() {
    let cfg = HyperConfig {
        state_dim: STATE_DIM,
        hidden: 16,
        z_dim: 8,
        cell: CellKind::Lstm,
        base_hidden: 8,
        base_input: STATE_DIM,
        base_outputs: [2, 4, 1],
        mem_cols: 8,
    };
    let net = HyperNet::new(cfg);
    let spec = EnvSpec::new(Task::Push);
    let w = spec.arena_half_width;
    let mut r = stream(12, Stream::HypernetInit);
    for _ in 0..20 {
        let theta = net.init(&mut r);
        let fs: Vec<f64> = (0..STATE_DIM).map(|_| r.random_range(-1.0..1.0)).collect();
        let out = net.generate_episode(&theta, &HyperState::zeros(16), &fs, &Role::ALL);
        assert!(out.state.is_finite());
        let ctx: Vec<f64> = (0..STATE_DIM).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut sub = BaseRnn::from_generated(out.get(Role::Subgoal).unwrap());
        for g in gen_subgoals(&mut sub, &ctx, w, 4) {
            assert!(g.iter().all(|x| x.abs() <= w));
        }
        let mut init = BaseRnn::from_generated(out.get(Role::Init).unwrap());
        let s0 = gen_init_state(&mut init, &ctx, w);
        assert_eq!(s0.len(), STATE_DIM);
        assert_eq!((s0[2], s0[3]), (0.0, 0.0));
        let g = out.get(Role::Reward).unwrap();
        let pot = PotentialFn::new(g.shape, g.theta_b.clone(), 0.99);
        assert!(pot.value(&ctx).is_finite());
    }
}

#[test]
fn environment_is_a_pure_function_of_its_inputs() {
    for task in [Task::Reach, Task::Push] {
        let spec = EnvSpec::new(task);
        let (s1, o1) = env_reset_seeded(&spec, None, None, 9);
        let (s2, o2) = env_reset_seeded(&spec, None, None, 9);
        assert_eq!((&s1, &o1), (&s2, &o2));
        let mut r = stream(13, Stream::Action);
        let mut s = s1;
        for _ in 0..spec.max_steps {
            let a = [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)];
            let x = env_step(&spec, &s, &a);
            assert_eq!(x, env_step(&spec, &s, &a));
            assert!(x.state.agent_pos.iter().all(|p| p.abs() <= spec.arena_half_width));
            assert!((0.0..=1.0).contains(&x.fractional_success));
            s = x.state;
            if x.done {
                break;
            }
        }
    }
}

#[test]
fn every_variant_trains_with_finite_outputs() {
    for v in Variant::ALL {
        let mut tr = Trainer::new(small(v, 2)).unwrap();
        let recs = tr.train(&mut NullObserver).unwrap();
        assert_eq!(recs.len(), 2, "{v}");
        for m in &recs {
            assert!(m.values().iter().all(|x| x.is_finite()), "{v}: {m:?}");
            assert!((0.0..=1.0).contains(&m.fractional_success));
        }
        assert!(tr.theta().iter().all(|x| x.is_finite()));
        assert!(tr.memory().is_finite());
        if v == Variant::Ppo {
            assert!(recs.iter().all(|m| m.j_outer == 0.0 && m.hypergrad_norm == 0.0));
            assert!(tr.theta().is_empty());
        }
    }
}

#[test]
fn outer_update_moves_theta_only_when_enabled() {
    let mut on = Trainer::new(small(Variant::Moc, 4)).unwrap();
    let before = on.theta().to_vec();
    on.train(&mut NullObserver).unwrap();
    assert_ne!(on.theta(), &before[..]);

    let mut cfg = small(Variant::Moc, 4);
    cfg.outer_lr = 0.0;
    let mut off = Trainer::new(cfg).unwrap();
    off.train(&mut NullObserver).unwrap();
    assert_eq!(off.theta(), &before[..]);
}

#[test]
fn seeds_produce_different_runs() {
    let a = Trainer::new(small(Variant::MocMemoryMinus, 0)).unwrap().train(&mut NullObserver).unwrap();
    let b = Trainer::new(small(Variant::MocMemoryMinus, 1)).unwrap().train(&mut NullObserver).unwrap();
    let c = Trainer::new(small(Variant::MocMemoryMinus, 0)).unwrap().train(&mut NullObserver).unwrap();
    assert_ne!(a, b);
    assert_eq!(a, c);
}
