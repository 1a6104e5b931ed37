use std::path::Path;

use dlf::config::TrainConfig;
use dlf::dataset::Dataset;
use dlf::error::DlfError;
use dlf::params::ParamGroup;
use dlf::training::{checkpoint_path, trace_path, Trainer};

const TINY: &str = "embed_dim=16\ndetail_dim=4\nstages=1\nheads=2\ncodebook_size=64\ngen_channels=8,8,8,8\n\
entropy_hidden=8\ndw_kernel=3\ncrop=32\nmax_images=12\nbatch=2\nstep_scale=0.0001\nrate_scale=0.05\n";

/// `TINY` with the keys of `extra` replaced.
fn config(dir: &Path, extra: &str) -> TrainConfig {
    let key = |l: &str| l.split('=').next().unwrap_or("").trim().to_string();
    let overridden: Vec<String> = extra.lines().map(key).collect();
    let base: String = TINY.lines().filter(|l| !overridden.contains(&key(l))).map(|l| format!("{l}\n")).collect();
    TrainConfig::parse(&format!("{base}out_dir={}\n{extra}", dir.display())).unwrap()
}

fn run(cfg: TrainConfig) -> Trainer {
    let data = Dataset::load(&cfg.data).unwrap();
    let mut t = Trainer::new(cfg).unwrap();
    let reports = t.run(&data, |_| {}).unwrap();
    for r in &reports {
        assert_eq!(r.total, r.weighted_sum());
    }
    t
}

fn stage0(dir: &Path) -> std::path::PathBuf {
    let t = run(config(dir, "stage=0\nsteps=3\ntokenizer_steps=3\n"));
    checkpoint_path(&t.cfg)
}

fn snapshot(t: &Trainer, group: ParamGroup) -> Vec<Vec<f32>> {
    t.model
        .store
        .in_group(group)
        .iter()
        .map(|(_, v)| v.as_tensor().flatten_all().unwrap().to_vec1().unwrap())
        .collect()
}

#[test]
fn later_stages_need_their_predecessor() {
    let dir = tempfile::tempdir().unwrap();
    let err = Trainer::new(config(dir.path(), "stage=1\nsteps=2\n")).err().unwrap();
    assert!(matches!(err, DlfError::StageOrder(_)));
    assert_eq!(err.exit_code(), 3);

    let s0 = stage0(dir.path());
    let err = Trainer::new(config(
        dir.path(),
        &format!("stage=2\nsteps=2\ninit_checkpoint={}\n", s0.display()),
    ))
    .err()
    .unwrap();
    assert!(matches!(err, DlfError::StageOrder(_)), "{err}");
}

#[test]
fn freeze_contracts_of_stages_one_and_two() {
    let dir = tempfile::tempdir().unwrap();
    let s0 = stage0(dir.path());
    let cfg1 = config(dir.path(), &format!("stage=1\nsteps=3\nlr=1e-2\ninit_checkpoint={}\n", s0.display()));
    let data = Dataset::load(&cfg1.data).unwrap();
    let mut t1 = Trainer::new(cfg1).unwrap();
    let before: Vec<_> = ParamGroup::ALL.iter().map(|&g| snapshot(&t1, g)).collect();
    t1.run(&data, |_| {}).unwrap();
    for (g, b) in ParamGroup::ALL.iter().zip(&before) {
        let changed = snapshot(&t1, *g) != *b;
        match g {
            ParamGroup::Semantic | ParamGroup::Auxiliary | ParamGroup::Generator => {
                assert!(!changed, "{} moved in stage 1", g.name())
            }
            ParamGroup::Discriminator => {}
            _ => assert!(changed, "{} did not train in stage 1", g.name()),
        }
    }

    let s1 = checkpoint_path(&t1.cfg);
    let cfg2 = config(
        dir.path(),
        &format!("stage=2\nsteps=2\nlr=1e-2\nadversarial=true\ninit_checkpoint={}\n", s1.display()),
    );
    let mut t2 = Trainer::new(cfg2).unwrap();
    let before: Vec<_> = ParamGroup::ALL.iter().map(|&g| snapshot(&t2, g)).collect();
    t2.run(&data, |_| {}).unwrap();
    for (g, b) in ParamGroup::ALL.iter().zip(&before) {
        let changed = snapshot(&t2, *g) != *b;
        assert_eq!(changed, *g != ParamGroup::Auxiliary, "{}", g.name());
    }
}

#[test]
fn same_seed_gives_identical_traces_and_checkpoints() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ta = run(config(a.path(), "stage=0\nsteps=3\ntokenizer_steps=2\nseed=9\n"));
    let tb = run(config(b.path(), "stage=0\nsteps=3\ntokenizer_steps=2\nseed=9\n"));
    let read = |p: std::path::PathBuf| std::fs::read(p).unwrap();
    assert_eq!(read(trace_path(&ta.cfg)), read(trace_path(&tb.cfg)));
    assert_eq!(read(checkpoint_path(&ta.cfg)), read(checkpoint_path(&tb.cfg)));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ta = run(config(a.path(), "stage=0\nsteps=4\n"));
    run(config(b.path(), "stage=0\nsteps=2\n"));
    let tb = run(config(b.path(), "stage=0\nsteps=4\n"));
    assert_eq!(tb.step, 4);
    let read = |p: std::path::PathBuf| std::fs::read_to_string(p).unwrap();
    assert_eq!(read(trace_path(&ta.cfg)), read(trace_path(&tb.cfg)));
}

#[test]
fn autoencoder_overfits_ten_images() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "stage=0\nsteps=100\nlr=1e-3\nbatch=10\n");
    let data = Dataset::load(&cfg.data).unwrap();
    let batch: Vec<_> = data.train.iter().take(10).collect();
    let mut t = Trainer::new(cfg).unwrap();
    let mut rng = dlf::params::seeded_rng(0, 1);
    let losses: Vec<f64> = (0..100).map(|_| t.train_step(&batch, &mut rng).unwrap().total).collect();
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn empty_training_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &format!("stage=0\ndata_dir={}\n", dir.path().display()));
    let err = dlf::training::train(cfg, |_| {}).unwrap_err();
    assert!(matches!(err, DlfError::EmptyDataset(_)));
}
