use std::fs;

use sscsr::config::RunConfig;
use sscsr::imaging::{degrade, save_png, synthetic_texture, ImageF};
use sscsr::models::{Module, SrNetConfig};
use sscsr::train::checkpoint::{decode, encode};
use sscsr::train::runner::{run_training, train_until, Dataset, Objective};
use sscsr::train::{init_state, ssc_step, ssc_step_traced, substream, StepMetrics, TrainConfig};

fn pairs(seed: u64, n: usize, size: usize) -> Vec<(String, ImageF, ImageF)> {
    let mut rng = substream(seed, 0);
    (0..n)
        .map(|i| {
            let hr = synthetic_texture(&mut rng, size);
            (format!("im{i}"), degrade(&hr, 2).unwrap().to_float(), hr.to_float())
        })
        .collect()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        lr_patch_size: 8,
        learning_rate: 1e-3,
        model: SrNetConfig {
            scale: 2,
            channels: 6,
            num_blocks: 1,
        },
        proj_channels: 6,
        ..TrainConfig::default()
    }
}

fn run(cfg: &TrainConfig, data: &Dataset, objective: Objective, steps: u64) -> (sscsr::train::TrainState, Vec<StepMetrics>) {
    let mut s = init_state(cfg).unwrap();
    let mut rows = Vec::new();
    train_until(&mut s, data, objective, steps, |_, m| {
        rows.push(*m);
        Ok(())
    })
    .unwrap();
    (s, rows)
}

#[test]
fn zero_alpha_matches_supervised_training() {
    let data = Dataset::from_pairs(pairs(1, 4, 32), 2).unwrap();
    let cfg = TrainConfig {
        alpha: 0.0,
        ..small_config()
    };
    let (ssc, a) = run(&cfg, &data, Objective::Ssc, 25);
    let (sup, b) = run(&cfg, &data, Objective::Supervised, 25);
    assert!(ssc.online.params().bit_eq(sup.online.params()));
    let csv = |rows: &[StepMetrics]| rows.iter().map(StepMetrics::csv_row).collect::<Vec<_>>();
    assert_eq!(csv(&a), csv(&b));
    assert_eq!(ssc.aug_rng, sup.aug_rng);
}

#[test]
fn resume_reproduces_the_metric_stream() {
    let data = Dataset::from_pairs(pairs(2, 3, 32), 2).unwrap();
    let cfg = small_config();
    let (full, rows) = run(&cfg, &data, Objective::Ssc, 12);

    let (half, _) = run(&cfg, &data, Objective::Ssc, 5);
    let mut resumed = decode(&encode(&half)).unwrap();
    let mut tail = Vec::new();
    train_until(&mut resumed, &data, Objective::Ssc, 12, |_, m| {
        tail.push(*m);
        Ok(())
    })
    .unwrap();
    assert_eq!(tail, rows[5..]);
    assert!(resumed.bit_eq(&full));
    assert_eq!(encode(&resumed), encode(&full));
}

#[test]
fn target_is_never_on_the_tape() {
    let data = Dataset::from_pairs(pairs(3, 2, 24), 2).unwrap();
    let mut s = init_state(&small_config()).unwrap();
    for step in 0..10 {
        let batch = data.batch(&s.config, step).unwrap();
        let (_, trace) = ssc_step_traced(&mut s, &batch).unwrap();
        assert!(trace.tape_parameters.iter().all(|l| l.starts_with("online/") || l.starts_with("proj/")));
        assert_eq!(trace.gradient_buffers, s.online.params().len() + s.proj.params().len());
    }
}

#[test]
fn perturbing_target_changes_only_the_consistency_value() {
    let data = Dataset::from_pairs(pairs(4, 2, 24), 2).unwrap();
    let s = init_state(&small_config()).unwrap();
    let batch = data.batch(&s.config, 0).unwrap();
    let mut a = s.clone();
    let mut b = s.clone();
    for (_, t) in b.target.params_mut().iter_mut() {
        *t = t.map(|v| v * 1.1 + 0.01);
    }
    let ma = ssc_step(&mut a, &batch).unwrap();
    let mb = ssc_step(&mut b, &batch).unwrap();
    assert_eq!(ma.loss_rec, mb.loss_rec);
    assert_ne!(ma.loss_cons, mb.loss_cons);
}

#[test]
fn consistency_metric_switch_is_live() {
    let data = Dataset::from_pairs(pairs(5, 2, 24), 2).unwrap();
    let l1 = run(&small_config(), &data, Objective::Ssc, 3).1;
    let l2_cfg = TrainConfig {
        consistency_metric: sscsr::train::ConsistencyMetric::L2,
        ..small_config()
    };
    let l2 = run(&l2_cfg, &data, Objective::Ssc, 3).1;
    assert_eq!(l1[0].loss_rec, l2[0].loss_rec);
    assert_ne!(l1[0].loss_cons, l2[0].loss_cons);
}

#[test]
fn on_disk_run_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    fs::create_dir_all(root.join("HR")).unwrap();
    fs::create_dir_all(root.join("LRx2")).unwrap();
    let mut rng = substream(6, 0);
    for i in 0..2 {
        let hr = synthetic_texture(&mut rng, 32);
        save_png(&hr, &root.join(format!("HR/{i}.png"))).unwrap();
        save_png(&degrade(&hr, 2).unwrap(), &root.join(format!("LRx2/{i}.png"))).unwrap();
    }
    let out = dir.path().join("out");
    let cfg = RunConfig::parse(&format!(
        "channels = 4\nnum_blocks = 1\nproj_channels = 4\nbatch_size = 2\nlr_patch_size = 8\ntotal_steps = 6\n\
         checkpoint_every = 3\neval_every = 3\ndata_root = {}\noutput_dir = {}\n",
        root.display(),
        out.display()
    ))
    .unwrap();
    let summary = run_training(&cfg, None, Objective::Ssc).unwrap();
    assert_eq!(summary.steps_run, 6);
    for f in ["final.ckpt", "checkpoints/step_00000003.ckpt", "checkpoints/step_00000006.ckpt", "config.resolved"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let eval = fs::read_to_string(out.join("eval.csv")).unwrap();
    assert_eq!(eval.lines().count(), 5);
    assert!(eval.lines().nth(2).unwrap().starts_with("3,target,"));
    let echoed = RunConfig::load(&out.join("config.resolved")).unwrap();
    assert_eq!(echoed.train, cfg.train);

    let mut changed = cfg.clone();
    changed.train.alpha = 0.5;
    assert!(run_training(&changed, Some(&out.join("final.ckpt")), Objective::Ssc).is_err());
}
