//! Library-level checks of the training loops and evaluation.

use curriculum_dpo::consistency::consistency_forward;
use curriculum_dpo::diffusion::Denoiser;
use curriculum_dpo::harness::{
    distill, evaluate, finetune_curriculum, pretrain, read_metrics, Context, ExperimentConfig, Model, Variant,
};
use curriculum_dpo::nn::DenoiserNet;
use curriculum_dpo::numerics::rng::derive_seed;
use curriculum_dpo::Error;

fn quick() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.pretrain.iterations = 40;
    cfg.pretrain.batch_size = 32;
    cfg.pretrain.log_every = 10;
    cfg.distill.iterations = 20;
    cfg.distill.batch_size = 16;
    cfg.finetune.iterations = 25;
    cfg.curriculum.stage_iterations = 5;
    cfg.curriculum.samples_per_condition = 16;
    cfg.finetune.batch_size = 4;
    cfg.finetune.reward_samples = 8;
    cfg.finetune.log_every = 5;
    cfg.eval.n_samples = 32;
    cfg
}

fn diffusion(model: Model) -> Denoiser {
    match model {
        Model::Diffusion(d) => d,
        Model::Consistency(_) => panic!("expected a diffusion model"),
    }
}

#[test]
fn pretraining_reduces_loss_below_a_quarter() {
    for seed in 0..3 {
        let cfg = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        let out = pretrain(&cfg, None).unwrap();
        let first = out.rows.first().unwrap();
        let last = out.rows.last().unwrap();
        assert_eq!(first.iteration, 0);
        assert!(
            last.loss < 0.25 * first.loss,
            "seed {seed}: {} -> {}",
            first.loss,
            last.loss
        );
    }
}

#[test]
fn zero_iterations_return_the_initialization() {
    let mut cfg = quick();
    cfg.pretrain.iterations = 0;
    let den = diffusion(pretrain(&cfg, None).unwrap().model);
    let (schedule, _) = cfg.schedule.build().unwrap();
    let init = DenoiserNet::new(cfg.model, schedule.steps(), derive_seed(cfg.seed, "init")).unwrap();
    assert_eq!(den.net.params, init.params);

    cfg.distill.iterations = 0;
    let f = match distill(&cfg, &den, None).unwrap().model {
        Model::Consistency(f) => f,
        Model::Diffusion(_) => panic!("expected a consistency model"),
    };
    let ctx = Context::new(&cfg).unwrap();
    let (ids, c) = ctx.cycled_conditions(6).unwrap();
    let x = ctx
        .mixture
        .sample_for(&mut curriculum_dpo::numerics::rng::rng_from_seed(1), &ids);
    let t1 = ctx.grid.times()[0];
    assert_eq!(consistency_forward(&f, &x, &[t1; 6], &c).unwrap(), x);
}

#[test]
fn seeded_runs_are_reproducible() {
    let cfg = quick();
    let a = pretrain(&cfg, None).unwrap();
    let b = pretrain(&cfg, None).unwrap();
    assert_eq!(a.model.to_checkpoint().to_bytes(), b.model.to_checkpoint().to_bytes());
    assert_eq!(a.losses, b.losses);
    let teacher = diffusion(a.model);
    let d1 = distill(&cfg, &teacher, None).unwrap();
    let d2 = distill(&cfg, &teacher, None).unwrap();
    assert_eq!(d1.model.to_checkpoint().to_bytes(), d2.model.to_checkpoint().to_bytes());

    let mut other = cfg.clone();
    other.seed = 9;
    assert_ne!(pretrain(&other, None).unwrap().losses, b.losses);
}

#[test]
fn stage_schedule_budget_and_reference() {
    let mut cfg = quick();
    cfg.finetune.iterations = 2000;
    cfg.curriculum.stage_iterations = 400;
    cfg.finetune.reward_samples = 0;
    cfg.finetune.batch_size = 2;
    cfg.finetune.log_every = 1000;
    cfg.pretrain.iterations = 5;
    let base = pretrain(&cfg, None).unwrap().model;
    let out = finetune_curriculum(&cfg, &base, None, None).unwrap();
    let starts: Vec<usize> = out.transitions.iter().map(|t| t.iteration).collect();
    assert_eq!(starts, vec![0, 400, 800, 1200, 1600]);
    assert_eq!(out.optimizer_steps, cfg.stage_budgets().unwrap().iter().sum::<usize>());
    assert!(out.reference_intact);
    assert!(out.transitions.iter().all(|t| t.probe_max_diff == 0.0));
    // Stage-boundary rows are always logged.
    for s in &starts {
        assert!(out.rows.iter().any(|r| r.iteration == *s));
    }
}

#[test]
fn metrics_file_invariants_and_accumulation() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick();
    cfg.finetune.grad_accum = 2;
    let base = pretrain(&cfg, None).unwrap().model;
    let run = dir.path().join("ft");
    let out = finetune_curriculum(&cfg, &base, None, Some(&run)).unwrap();
    assert_eq!(out.optimizer_steps, cfg.finetune.iterations);
    let rows = read_metrics(&run.join("metrics.csv")).unwrap();
    assert_eq!(rows, out.rows);
    assert!(rows.windows(2).all(|w| w[1].iteration > w[0].iteration));
    assert!(rows.windows(2).all(|w| w[1].stage >= w[0].stage));
    assert!(rows.iter().all(|r| r.grad_weight.is_some() && r.mean_reward.is_some()));
    assert!(run.join("checkpoint.bin").exists() && run.join("stages.csv").exists());
    // The merged checkpoint loads as a plain model without adapters.
    let m = Model::load(&run.join("checkpoint.bin")).unwrap();
    assert_eq!(m.net().params.trainable_count(), base.net().params.trainable_count());
}

#[test]
fn consistency_finetuning_needs_a_teacher() {
    let mut cfg = quick();
    let teacher = diffusion(pretrain(&cfg, None).unwrap().model);
    cfg.variant = Variant::Consistency;
    let student = distill(&cfg, &teacher, None).unwrap().model;
    assert!(matches!(
        finetune_curriculum(&cfg, &student, None, None),
        Err(Error::Config(_))
    ));
    let out = finetune_curriculum(&cfg, &student, Some(&teacher), None).unwrap();
    assert_eq!(out.model.variant(), Variant::Consistency);
    // Variant mismatch between config and checkpoint.
    cfg.variant = Variant::Diffusion;
    assert!(matches!(
        finetune_curriculum(&cfg, &student, None, None),
        Err(Error::Config(_))
    ));
}

#[test]
fn budget_mismatch_fails_before_training() {
    let mut cfg = quick();
    cfg.curriculum.stage_budgets = Some(vec![5, 5, 5, 5, 4]);
    let base = pretrain(&quick(), None).unwrap().model;
    assert!(matches!(
        finetune_curriculum(&cfg, &base, None, None),
        Err(Error::Config(_))
    ));
}

#[test]
fn self_evaluation_is_all_ties() {
    let cfg = quick();
    let ctx = Context::new(&cfg).unwrap();
    let m = pretrain(&cfg, None).unwrap().model;
    let s = evaluate(&ctx, &m, Some(&m), 64, 3).unwrap();
    let v = s.versus_reference.unwrap();
    assert_eq!((v.wins, v.ties, v.losses), (0, 64, 0));
    assert_eq!(v.tie_split_win_rate, 0.5);
    assert_eq!(v.reference_mean_reward, s.mean_reward);
    assert!(matches!(evaluate(&ctx, &m, None, 0, 3), Err(Error::Contract(_))));
}
