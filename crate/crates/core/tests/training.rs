use panelforge_core::annotation::Bucket;
use panelforge_core::checkpoint::CheckpointArchive;
use panelforge_core::params::STAGE1_SECTIONS;
use panelforge_core::synthetic::{overfit_fixture, pair_fixture};
use panelforge_core::training::*;
use panelforge_core::Error;

fn quick(stage: u8, steps: usize) -> TrainConfig {
    TrainConfig {
        stage,
        preset: "tiny".into(),
        lr: Some(1e-3),
        steps: Some(steps),
        buckets: vec![Bucket::new(32, 32)],
        batch_min: 2,
        batch_max: 2,
        ..TrainConfig::default()
    }
}

#[derive(Default)]
struct Collect(Vec<CheckpointArchive>);

impl TrainObserver for Collect {
    fn on_checkpoint(&mut self, a: &CheckpointArchive) -> panelforge_core::Result<()> {
        self.0.push(a.clone());
        Ok(())
    }
}

#[test]
fn same_seed_same_run() {
    let ds = overfit_fixture().unwrap();
    let a = train_stage1(&ds, &quick(1, 3), None, &mut ()).unwrap();
    let b = train_stage1(&ds, &quick(1, 3), None, &mut ()).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    let c = train_stage1(&ds, &TrainConfig { seed: 1, ..quick(1, 3) }, None, &mut ()).unwrap();
    assert_ne!(a.log, c.log);
}

#[test]
fn zero_steps_writes_the_initialization() {
    let ds = overfit_fixture().unwrap();
    let out = train_stage1(&ds, &quick(1, 0), None, &mut ()).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(out.checkpoint.step, 0);
    let (ps, _) = load_model(&out.checkpoint).unwrap();
    let fresh = panelforge_core::ParamStore::new(0, candle_core::DType::F32);
    panelforge_core::diffusion::Model::new(&fresh, &quick(1, 0).model_config()).unwrap();
    for (name, v) in fresh.all() {
        let got = ps.var(&name).unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(got, v.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap(), "{name}");
    }
}

#[test]
fn resume_replays_batches_and_noise() {
    let ds = overfit_fixture().unwrap();
    let full = train_stage1(&ds, &quick(1, 4), None, &mut ()).unwrap();
    let mut seen = Collect::default();
    let cfg = TrainConfig { checkpoint_every: 2, ..quick(1, 4) };
    train_stage1(&ds, &cfg, None, &mut seen).unwrap();
    assert_eq!(seen.0.len(), 1);
    let mid = CheckpointArchive::from_bytes(&seen.0[0].to_bytes().unwrap()).unwrap();
    assert_eq!(mid.step, 2);
    let resumed = train_stage1(&ds, &quick(1, 4), Some(&mid), &mut ()).unwrap();
    assert_eq!(resumed.log.len(), 2);
    assert_eq!(resumed.log[0].step, 3);
    // Same weights, same batch, same noise: the first resumed loss is exact.
    assert_eq!(resumed.log[0].total, full.log[2].total);
}

#[test]
fn resume_with_other_config_is_refused() {
    let ds = overfit_fixture().unwrap();
    let a = train_stage1(&ds, &quick(1, 1), None, &mut ()).unwrap();
    let other = TrainConfig { caption_dropout: 0.3, ..quick(1, 3) };
    assert!(matches!(train_stage1(&ds, &other, Some(&a.checkpoint), &mut ()), Err(Error::Checkpoint(_))));
    // A longer run of the same config resumes fine.
    assert!(train_stage1(&ds, &quick(1, 2), Some(&a.checkpoint), &mut ()).is_ok());
}

#[test]
fn no_adapter_cannot_run_stage_two() {
    let ds = pair_fixture().unwrap();
    let s1 = train_stage1(&ds, &quick(1, 0), None, &mut ()).unwrap();
    let cfg = TrainConfig { no_adapter: true, ..quick(2, 1) };
    assert!(matches!(train_stage2(&ds, &s1.checkpoint, &cfg, None, &mut ()), Err(Error::Config(_))));
}

#[test]
fn stage_two_leaves_generator_sections_alone() {
    let ds = pair_fixture().unwrap();
    let s1 = train_stage1(&ds, &quick(1, 2), None, &mut ()).unwrap();
    let out = train_stage2(&ds, &s1.checkpoint, &quick(2, 3), None, &mut ()).unwrap();
    assert_eq!(out.log.len(), 3);
    for s in STAGE1_SECTIONS {
        assert_eq!(out.checkpoint.section_hash(s).unwrap(), s1.checkpoint.section_hash(s).unwrap(), "{s}");
    }
    assert!(out.checkpoint.has_section("adapter"));
    let (_, _, adapter) = load_pipeline(&out.checkpoint).unwrap();
    assert!(adapter.is_some());
    let names: Vec<&str> = out.log[0].components.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["lm", "mse", "diff"]);
}

#[test]
fn stage_two_rejects_stage_one_resume() {
    let ds = pair_fixture().unwrap();
    let s1 = train_stage1(&ds, &quick(1, 0), None, &mut ()).unwrap();
    let r = train_stage2(&ds, &s1.checkpoint, &quick(2, 1), Some(&s1.checkpoint), &mut ());
    assert!(matches!(r, Err(Error::Checkpoint(_))));
}

#[test]
fn checkpoint_file_round_trip() {
    let ds = overfit_fixture().unwrap();
    let out = train_stage1(&ds, &quick(1, 1), None, &mut ()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s1.ckpt");
    out.checkpoint.save(&path).unwrap();
    let back = CheckpointArchive::load(&path).unwrap();
    assert_eq!(back.to_bytes().unwrap(), out.checkpoint.to_bytes().unwrap());
    assert_eq!(back.section_hashes().unwrap(), out.checkpoint.section_hashes().unwrap());
    let csv = dir.path().join("loss.csv");
    write_loss_csv(&csv, &out.log).unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.lines().count() == 2, "{text}");
}
