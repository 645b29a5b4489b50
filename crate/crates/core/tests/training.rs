mod common;

use common::*;
use rand::Rng;
use voxdistill::experiment::AblationFlags;
use voxdistill::model::{ArchDescriptor, Checkpoint};
use voxdistill::trainer::{
    compute_gradients, read_log, run_training, sample_batch, train_step, TrainConfig, TrainState, FINAL_CHECKPOINT,
};
use voxdistill::losses::HyperParams;
use voxdistill::synth::DatasetSplit;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        crop: [8, 8, 8],
        arch: ArchDescriptor {
            base_width: 2,
            levels: 2,
            pool_size: 4,
            mlp_hidden: [8, 8],
            d_h: 4,
            ..ArchDescriptor::default()
        },
        hyper: HyperParams {
            d_h: 4,
            ..HyperParams::default()
        },
        t_max: 20,
        lr_interval: 0,
        ..TrainConfig::default()
    }
}

fn tiny_split() -> DatasetSplit {
    phantom_split([16, 16, 16], 3, 3, 0, 77)
}

#[test]
fn network_gradient_matches_finite_differences() {
    let cfg = tiny_config();
    let split = tiny_split();
    let state = TrainState::new(&cfg).unwrap();
    let t = cfg.t_max / 2;
    let batch = sample_batch(&split, &cfg, t).unwrap();
    let (_, grads) = compute_gradients(&state.student, &state.teacher, &batch, &cfg, t).unwrap();
    let mut r = rng(5);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for ti in 0..state.student.tensors.len() {
        for _ in 0..3 {
            let j = r.gen_range(0..state.student.tensors[ti].data.len());
            let mut p = state.student.clone();
            let x0 = p.tensors[ti].data[j];
            p.tensors[ti].data[j] = x0 + h;
            let up = compute_gradients(&p, &state.teacher, &batch, &cfg, t).unwrap().0.total;
            p.tensors[ti].data[j] = x0 - h;
            let down = compute_gradients(&p, &state.teacher, &batch, &cfg, t).unwrap().0.total;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.tensors[ti].data[j];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                err < 1e-3,
                "{}[{j}]: analytic {analytic:e} vs numeric {numeric:e}",
                state.student.tensors[ti].name
            );
            worst = worst.max(err);
            checked += 1;
        }
    }
    println!("{checked} parameter entries checked, worst relative error {worst:.2e}");
}

#[test]
fn teacher_moves_only_by_ema() {
    let cfg = tiny_config();
    let split = tiny_split();
    let mut state = TrainState::new(&cfg).unwrap();
    let batch = sample_batch(&split, &cfg, 0).unwrap();
    train_step(&mut state, &batch, &cfg).unwrap();
    let teacher = state.teacher.clone();
    let batch = sample_batch(&split, &cfg, 1).unwrap();
    let (_, grads) = compute_gradients(&state.student, &state.teacher, &batch, &cfg, 1).unwrap();
    assert_eq!(state.teacher.checksum(), teacher.checksum(), "gradient pass mutated the teacher");
    assert!(grads.tensors.iter().any(|t| t.data.iter().any(|&g| g != 0.0)));
}

#[test]
fn supervised_loss_trends_down() {
    let mut cfg = tiny_config();
    cfg.t_max = 50;
    cfg.arch.base_width = 4;
    let split = tiny_split();
    let (_, log) = run_training(&cfg, &split, None).unwrap();
    assert_eq!(log.len(), 50);
    let smooth: Vec<f64> = log.windows(10).map(|w| w.iter().map(|r| r.report.sup).sum::<f64>() / 10.0).collect();
    let first = smooth[0];
    let last = *smooth.last().unwrap();
    assert!(last < first, "10-step mean of the supervised loss went {first} -> {last}");
}

#[test]
fn zero_iterations_returns_initial_state() {
    let mut cfg = tiny_config();
    cfg.t_max = 0;
    let (state, log) = run_training(&cfg, &tiny_split(), None).unwrap();
    assert!(log.is_empty());
    assert_eq!(state, TrainState::new(&cfg).unwrap());
}

#[test]
fn resume_from_midpoint_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let split = tiny_split();
    let mut cfg = tiny_config();
    cfg.t_max = 8;
    cfg.checkpoint_every = 4;
    cfg.checkpoint_dir = Some(dir.path().join("ckpt"));
    cfg.log_path = Some(dir.path().join("log.csv"));
    let (straight, straight_log) = run_training(&cfg, &split, None).unwrap();

    let mid = Checkpoint::load(&dir.path().join("ckpt").join("ckpt_000004.bin"), Some(&cfg.arch)).unwrap();
    let resumed_from = TrainState::from_checkpoint(mid).unwrap();
    assert_eq!(resumed_from.t, 4);
    let (resumed, resumed_log) = run_training(&cfg, &split, Some(resumed_from)).unwrap();
    assert_eq!(resumed.student, straight.student);
    assert_eq!(resumed.teacher, straight.teacher);
    assert_eq!(resumed.momentum, straight.momentum);
    assert_eq!(resumed_log, straight_log);
    assert_eq!(read_log(cfg.log_path.as_ref().unwrap()).unwrap(), straight_log);

    let fin = Checkpoint::load(&dir.path().join("ckpt").join(FINAL_CHECKPOINT), Some(&cfg.arch)).unwrap();
    assert_eq!(TrainState::from_checkpoint(fin).unwrap().student, straight.student);
}

#[test]
fn resume_rejects_mismatched_seed() {
    let mut cfg = tiny_config();
    cfg.t_max = 2;
    let split = tiny_split();
    let (state, _) = run_training(&cfg, &split, None).unwrap();
    cfg.seed = 9;
    assert!(run_training(&cfg, &split, Some(state)).is_err());
}

#[test]
fn ablations_zero_only_their_terms() {
    let cfg = tiny_config();
    let split = tiny_split();
    let state = TrainState::new(&cfg).unwrap();
    let t = 5;
    let batch = sample_batch(&split, &cfg, t).unwrap();
    let (full, _) = compute_gradients(&state.student, &state.teacher, &batch, &cfg, t).unwrap();
    let run = |name: &str| {
        let c = AblationFlags::variant(name).unwrap().apply(&cfg);
        compute_gradients(&state.student, &state.teacher, &batch, &c, t).unwrap().0
    };
    let wo_pd = run("wo_pd");
    assert_eq!((wo_pd.sup, wo_pd.contrast, wo_pd.con), (full.sup, full.contrast, full.con));
    let wo_c = run("wo_contrast");
    assert_eq!((wo_c.sup, wo_c.pd, wo_c.con), (full.sup, full.pd, full.con));
    let wo_sdm_loss = run("wo_sdm_loss");
    assert_eq!((wo_sdm_loss.contrast, wo_sdm_loss.pd, wo_sdm_loss.con), (full.contrast, full.pd, full.con));
    assert!(wo_sdm_loss.sup < full.sup);
    for r in [wo_pd, wo_c] {
        assert!(r.total < full.total);
    }
}

#[test]
fn different_seeds_diverge_same_seed_repeats() {
    let mut cfg = tiny_config();
    cfg.t_max = 3;
    let split = tiny_split();
    let a = run_training(&cfg, &split, None).unwrap();
    let b = run_training(&cfg, &split, None).unwrap();
    assert_eq!(a.1, b.1);
    cfg.seed = 1;
    let c = run_training(&cfg, &split, None).unwrap();
    assert_ne!(a.1, c.1);
}
