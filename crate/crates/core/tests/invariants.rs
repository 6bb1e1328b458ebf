use diffpolicy::aln::{
    normalize_rewards, AlphaSchedule, SamplerConfig, TimestepSampler, TrajectoryWeights, WEIGHT_FLOOR,
};
use diffpolicy::denoiser::{init_params, Checkpoint, DenoiserDims, OutputMap};
use diffpolicy::diffusion::{
    ddim_reverse_step, forward_noise, make_noise_schedule, predicted_clean, spaced_timesteps,
    ActionSeq, BetaScheduleKind, ScheduleConfig,
};
use diffpolicy::envbench::{
    evaluate, scripted_expert, Budget, EnvConfig, ExpertPlanner, PushEnv, RandomPlanner,
};
use diffpolicy::hvts::{
    parse_stage_probs, ClassifyContext, OracleClassifier, ScheduleRanges, ScheduleTable,
    SchedulerConfig, SchedulerState, StageTemplate,
};
use proptest::prelude::*;

fn seq(values: &[f64]) -> ActionSeq {
    ActionSeq::from_flat(values.len() / 2, 2, values.to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alpha_bar_is_strictly_decreasing(steps in 1usize..300, lo in 1e-5f64..0.05, span in 0.0f64..0.5) {
        let s = make_noise_schedule(steps, lo, (lo + span).min(0.999), BetaScheduleKind::Linear).unwrap();
        let ab = s.alpha_bars();
        prop_assert!(ab.iter().all(|&a| a > 0.0 && a < 1.0));
        prop_assert!(ab.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn spaced_steps_are_increasing_and_end_at_total(total in 1usize..500, frac in 0.0f64..1.0) {
        let n = 1 + ((total - 1) as f64 * frac) as usize;
        let ks = spaced_timesteps(total, n).unwrap();
        prop_assert_eq!(ks.len(), n);
        prop_assert_eq!(*ks.last().unwrap(), total);
        prop_assert!(ks[0] >= 1);
        prop_assert!(ks.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn exact_noise_inverts_corruption(
        a0 in prop::collection::vec(-1.0f64..1.0, 8),
        eps in prop::collection::vec(-3.0f64..3.0, 8),
        k in 1usize..=100,
    ) {
        let s = ScheduleConfig::default().build().unwrap();
        let (a0, eps) = (seq(&a0), seq(&eps));
        let ak = forward_noise(&s, &a0, k, &eps).unwrap();
        let x0 = predicted_clean(&s, &ak, &eps, k).unwrap();
        for (x, a) in x0.as_flat().iter().zip(a0.as_flat()) {
            prop_assert!((x - a).abs() < 1e-6);
        }
        if k > 1 {
            let back = ddim_reverse_step(&s, &eps, &ak, k, k / 2, 0.0, None).unwrap();
            let expect = forward_noise(&s, &a0, k / 2, &eps).unwrap();
            for (x, a) in back.as_flat().iter().zip(expect.as_flat()) {
                prop_assert!((x - a).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn normalized_rewards_have_zero_mean(losses in prop::collection::vec(0.0f64..50.0, 2..64)) {
        prop_assume!(losses.iter().any(|&l| l != losses[0]));
        let r = normalize_rewards(&losses, 1e-8);
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        prop_assert!(mean.abs() < 1e-9);
    }

    #[test]
    fn trajectory_weights_stay_floored_and_mean_one(
        updates in prop::collection::vec((0usize..10, -60.0f64..10.0, 0.001f64..1.0), 1..200),
    ) {
        let alpha = AlphaSchedule { alpha_max: 0.1, alpha_min: 0.01, total_steps: 10 };
        let mut w = TrajectoryWeights::uniform(10, alpha).unwrap();
        for (i, r, a) in updates {
            w.update(i, r, a).unwrap();
            prop_assert!(w.values().iter().all(|&v| v >= WEIGHT_FLOOR));
            let mean = w.values().iter().sum::<f64>() / 10.0;
            prop_assert!((mean - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sampler_distribution_stays_valid(
        batches in prop::collection::vec(prop::collection::vec((1usize..=20, -3.0f64..3.0), 1..8), 1..25),
        lambda in 0.0f64..5.0,
    ) {
        let mut s = TimestepSampler::new(
            SamplerConfig { steps: 20, embed_dim: 8, hidden: 8, entropy_coef: lambda, warmup_steps: 0, lr: 0.05 },
            1,
        ).unwrap();
        s.observe_step(0);
        for b in batches {
            let (ks, rs): (Vec<usize>, Vec<f64>) = b.into_iter().unzip();
            s.update(&ks, &rs).unwrap();
            let p = s.distribution();
            prop_assert!(p.iter().all(|&x| x > 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stage_beliefs_are_ranked_and_bounded(
        probs in prop::collection::vec(0.0f64..1.5, 1..6),
        top_k in 1usize..5,
    ) {
        let stages: Vec<StageTemplate> = (0..6)
            .map(|i| StageTemplate::new(&format!("stage_{i}"), "Action features: x").unwrap())
            .collect();
        let text: String = probs.iter().enumerate().map(|(i, p)| format!("stage_{i}: {p}\n")).collect();
        let b = parse_stage_probs(&text, &stages, top_k).unwrap();
        let e = b.entries();
        prop_assert!(e.len() <= top_k);
        prop_assert!(e.iter().all(|&(_, p)| (0.0..=1.0).contains(&p)));
        prop_assert!(e.windows(2).all(|w| w[0].1 >= w[1].1));
        prop_assert!(e.iter().map(|(_, p)| p).sum::<f64>() <= 1.0 + 1e-6);
    }

    #[test]
    fn scheduler_budgets_in_range_and_calls_bounded(
        stages in prop::collection::vec(0usize..5, 1..150),
        period in 1usize..20,
    ) {
        let ranges = ScheduleRanges::default();
        let table = ScheduleTable::from_pairs(&[(16, 20), (16, 20), (8, 40), (12, 30), (16, 20)], ranges).unwrap();
        let config = SchedulerConfig { gap: 0.0, period: Some(period), ..SchedulerConfig::default() };
        let mut st = SchedulerState::new(config, &table).unwrap();
        let mut oracle = OracleClassifier::new(5);
        let mut emitted = Vec::new();
        for &stage in &stages {
            let out = st.tick(&ClassifyContext::with_stage(stage), &mut oracle, &table).unwrap();
            prop_assert!(ranges.contains(out.n_action_steps, out.num_inference_steps));
            emitted.push((out.n_action_steps, out.num_inference_steps));
        }
        prop_assert!(st.classifier_calls() <= stages.len().div_ceil(period) + 1);
        let mut again = SchedulerState::new(config, &table).unwrap();
        for (&stage, &e) in stages.iter().zip(&emitted) {
            let out = again.tick(&ClassifyContext::with_stage(stage), &mut oracle, &table).unwrap();
            prop_assert_eq!((out.n_action_steps, out.num_inference_steps), e);
        }
    }

    #[test]
    fn env_state_stays_in_the_unit_square(
        seed in any::<u64>(),
        actions in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..150),
    ) {
        let mut env = PushEnv::reset(EnvConfig::default(), seed);
        for (x, y) in actions {
            if env.is_done() {
                break;
            }
            env.step(&[x, y]).unwrap();
            let clone = PushEnv::from_state(env.config, env.agent, env.block, env.target);
            prop_assert_eq!(clone.stage(), env.stage());
            for v in env.agent.iter().chain(&env.block) {
                prop_assert!((0.0..=1.0).contains(v));
            }
        }
        prop_assert!(env.steps() <= env.config.max_steps);
    }

    #[test]
    fn expert_actions_are_bounded(seed in any::<u64>()) {
        let mut env = PushEnv::reset(EnvConfig::default(), seed);
        while !env.is_done() {
            let a = scripted_expert(&env);
            prop_assert!(a.iter().all(|v| v.abs() <= 1.0));
            env.step(&a).unwrap();
        }
        prop_assert!(env.is_success());
    }
}

#[test]
fn early_success_never_exceeds_success() {
    let env = EnvConfig::default();
    for seed in 0..3 {
        let mut expert = ExpertPlanner { env, horizon: 16 };
        let (m, _) = evaluate(&mut expert, "expert", env, &Budget::fixed(8, 1), 10, seed, None).unwrap();
        assert!(m.early_success_rate <= m.success_rate);
        let mut random = RandomPlanner { horizon: 16 };
        let (m, _) = evaluate(&mut random, "random", env, &Budget::fixed(8, 1), 10, seed, None).unwrap();
        assert!(m.early_success_rate <= m.success_rate);
    }
}

#[test]
fn checkpoint_round_trip_is_identity() {
    let dims = DenoiserDims {
        hidden: 16,
        embed_dim: 8,
        ..DenoiserDims::default()
    };
    let schedule = ScheduleConfig::default();
    for sigma in [None, Some(0.25)] {
        let params = init_params(3, dims, schedule.steps)
            .unwrap()
            .with_output(OutputMap::for_schedule(&schedule.build().unwrap(), sigma).unwrap())
            .unwrap();
        let ck = Checkpoint { params, schedule };
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, ck);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, bytes);
    }
}

#[test]
fn seeded_rng_streams_are_reproducible() {
    let env = EnvConfig::default();
    let mut a = RandomPlanner { horizon: 16 };
    let mut b = RandomPlanner { horizon: 16 };
    let (ma, ra) = evaluate(&mut a, "r", env, &Budget::fixed(8, 1), 5, 9, None).unwrap();
    let (mb, rb) = evaluate(&mut b, "r", env, &Budget::fixed(8, 1), 5, 9, None).unwrap();
    assert_eq!(ma.total_calls, mb.total_calls);
    assert_eq!(ra.iter().map(|r| &r.trace).collect::<Vec<_>>(), rb.iter().map(|r| &r.trace).collect::<Vec<_>>());
}
