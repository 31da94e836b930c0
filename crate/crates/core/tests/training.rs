use hkd::config::RunConfig;
use hkd::meta::Mode;
use hkd::train::{self, Control};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn two_class_teacher_learns_the_task() {
    let cfg = RunConfig::from_toml_str(
        r#"
        epochs = 50
        batch_size = 32
        [data]
        classes = 2
        dim = 8
        train_per_class = 100
        eval_per_class = 100
        meta_per_class = 5
        separation = 3.0
        spread = 0.2
        [teacher]
        hidden = [16]
        feature_tap = 0
        epochs = 50
        "#,
    )
    .unwrap();
    let splits = cfg.data.load(cfg.seed).unwrap();
    let run = train::train_teacher(&cfg, &splits, &mut Control::default()).unwrap();
    assert!(run.eval_accuracy > 0.9, "teacher accuracy {}", run.eval_accuracy);
}

/// Writes label-then-CHW records of 2x4x4 images whose brightness encodes the class.
fn raw_images(path: &std::path::Path, per_class: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bytes = Vec::new();
    for i in 0..per_class * 3 {
        let class = (i % 3) as u8;
        bytes.push(class);
        for _ in 0..32 {
            bytes.push(class * 80 + rng.gen_range(0..40));
        }
    }
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn conv_distillation_on_raw_binary_images() {
    let dir = tempfile::tempdir().unwrap();
    raw_images(&dir.path().join("train.bin"), 30, 1);
    raw_images(&dir.path().join("eval.bin"), 10, 2);
    let cfg_path = dir.path().join("img.toml");
    std::fs::write(
        &cfg_path,
        r#"
        mode = "hkd"
        epochs = 3
        batch_size = 16
        [data]
        source = "raw-binary"
        train_path = "train.bin"
        eval_path = "eval.bin"
        meta_per_class = 3
        augment = { kind = "flip" }
        image = { channels = 2, height = 4, width = 4, class_count = 3 }
        normalization = { mean = [0.5, 0.5], std = [0.25, 0.25] }
        [teacher]
        hidden = [12]
        feature_tap = 0
        conv_filters = [4]
        epochs = 4
        [student]
        hidden = [6]
        feature_tap = 0
        [meta]
        interval = 3
        hidden = 8
        "#,
    )
    .unwrap();
    let (cfg, _) = RunConfig::load(&cfg_path).unwrap();
    let splits = cfg.data.load(cfg.seed).unwrap();
    assert_eq!((splits.train.len(), splits.meta.len(), splits.eval.len()), (81, 9, 30));
    let teacher = train::train_teacher(&cfg, &splits, &mut Control::default()).unwrap();
    assert!(teacher.eval_accuracy > 0.9, "teacher accuracy {}", teacher.eval_accuracy);
    let run = train::distill_in_memory(&cfg, &splits, &teacher.teacher).unwrap();
    assert_eq!(run.metrics.len(), 3 * 6);
    assert!(run.meta.optimizer.steps() > 0);
    assert!(run.store.len() == splits.train.len());
}

#[test]
fn every_mode_keeps_weights_in_range() {
    let mut cfg = RunConfig::from_toml_str(
        r#"
        epochs = 2
        batch_size = 16
        [data]
        classes = 3
        dim = 4
        train_per_class = 30
        eval_per_class = 5
        meta_per_class = 3
        [teacher]
        hidden = [10, 10]
        feature_tap = 1
        epochs = 2
        [student]
        hidden = [4]
        [meta]
        range = 0.3
        interval = 2
        hidden = 6
        optimizer = { lr = 0.05 }
        "#,
    )
    .unwrap();
    let splits = cfg.data.load(cfg.seed).unwrap();
    let teacher = train::train_teacher(&cfg, &splits, &mut Control::default()).unwrap().teacher;
    for mode in Mode::ALL {
        cfg.mode = mode;
        let run = train::distill_in_memory(&cfg, &splits, &teacher).unwrap();
        for c in &run.curves {
            assert!((0.7..=1.3).contains(&c.beta_mean) && (0.7..=1.3).contains(&c.gamma_mean), "{mode}: {c:?}");
        }
        if mode == Mode::Static {
            assert!(run.curves.iter().all(|c| c.beta_mean == 1.0 && c.beta_std == 0.0));
        }
        assert_eq!(run.store.is_empty(), !mode.uses_ensemble());
    }
}
