use super::*;
use crate::fixtures::toy_training_setup;
use crate::numerics::ParamId;

fn trainer(steps: u64, seed: u64) -> Trainer {
    let (model, data) = toy_training_setup(50, 3, 11);
    let cfg = TrainConfig { batch_size: 4, seed, checkpoint_every: 0, ..TrainConfig::default() };
    Trainer::new(model, data, Schedule::scaled(steps, 1e-3).unwrap(), cfg).unwrap()
}

fn collect(t: &mut Trainer, until: u64) -> Vec<StepRecord> {
    let mut out = Vec::new();
    t.run(until, None, |r| out.push(*r)).unwrap();
    out
}

#[test]
fn checkpoint_bytes_round_trip() {
    let mut t = trainer(20, 1);
    collect(&mut t, 3);
    let mut a = Vec::new();
    t.checkpoint().write_to(&mut a).unwrap();
    assert_eq!(&a[..4], MAGIC);
    let back = Checkpoint::read_from(a.as_slice()).unwrap();
    assert_eq!(back.step, 3);
    assert_eq!(back.adam, t.adam);
    let mut b = Vec::new();
    back.write_to(&mut b).unwrap();
    assert_eq!(a, b);
}

#[test]
fn rejects_foreign_files() {
    let err = Checkpoint::read_from(&b"PLM0\0\0\0\0"[..]).unwrap_err();
    assert!(matches!(err, TrainError::Checkpoint(_)));
    assert!(Checkpoint::read_from(&b"PL"[..]).is_err());
}

#[test]
fn seeded_runs_identical() {
    let a = collect(&mut trainer(40, 5), 40);
    let b = collect(&mut trainer(40, 5), 40);
    assert_eq!(a, b);
    let c = collect(&mut trainer(40, 6), 40);
    assert_ne!(a, c);
}

#[test]
fn resume_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let mut full = trainer(30, 2);
    let reference = collect(&mut full, 30);

    let mut first = trainer(30, 2);
    first.run(12, Some(dir.path()), |_| {}).unwrap();
    let path = latest_checkpoint(dir.path()).unwrap().unwrap();
    let (_, data) = toy_training_setup(50, 3, 11);
    let mut resumed = Trainer::from_checkpoint(Checkpoint::load(&path).unwrap(), data).unwrap();
    assert_eq!(resumed.step(), 12);
    let rest = collect(&mut resumed, 30);
    assert_eq!(rest, reference[12..]);
    assert_eq!(resumed.model.params.iter().count(), full.model.params.len());
    for ((_, _, a), (_, _, b)) in resumed.model.params.iter().zip(full.model.params.iter()) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn keeps_last_two_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(10, 3);
    t.config.checkpoint_every = 2;
    t.run(10, Some(dir.path()), |_| {}).unwrap();
    let steps: Vec<u64> = list_checkpoints(dir.path()).unwrap().into_iter().map(|(s, _)| s).collect();
    assert_eq!(steps, vec![8, 10]);
}

#[test]
fn lm_loss_falls_over_200_steps() {
    let recs = collect(&mut trainer(200, 4), 200);
    assert_eq!(recs.len(), 200);
    let early = recs[..10].iter().map(|r| r.j_lm).sum::<f64>() / 10.0;
    let last = recs[199].j_lm;
    assert!(last < early, "J_LM {last} at step 200 vs early mean {early}");
}

#[test]
fn logged_schedule_follows_step_index() {
    let mut t = trainer(600, 4);
    let recs = collect(&mut t, 3);
    for r in &recs {
        let sv = t.schedule.at(r.step);
        assert_eq!((r.lr, r.lambda_m, r.r), (sv.lr, sv.lambda_m, sv.r));
    }
    assert_eq!(recs[0].step, 0);
    assert_eq!(recs[0].lr, 0.0);
}

#[test]
fn non_finite_loss_halts_with_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(20, 1);
    collect(&mut t, 2);
    let e = t.model.layout().sense_embeddings;
    t.model.params.get_mut(e).data_mut().fill(f32::NAN);
    let err = t.run(20, Some(dir.path()), |_| {}).unwrap_err();
    assert!(matches!(err, TrainError::NonFiniteLoss { step: 2, .. }), "{err}");
    let saved = list_checkpoints(dir.path()).unwrap();
    assert_eq!(saved.len(), 1);
    assert_eq!(saved[0].0, 2);
}

#[test]
fn non_finite_gradient_skips_update() {
    let mut t = trainer(20, 1);
    let mut g: Vec<Vec<f32>> = t.model.params.iter().map(|(_, _, x)| vec![0.0; x.len()]).collect();
    g[0][0] = f32::INFINITY;
    let before = t.model.params.get(ParamId(0)).data().to_vec();
    let err = adam_step(&mut t.model.params, &g, &mut t.adam, 1e-3, &AdamConfig::default()).unwrap_err();
    assert!(err.to_string().contains(t.model.params.name(ParamId(0))));
    assert_eq!(t.model.params.get(ParamId(0)).data(), &before[..]);
}

#[test]
fn log_file_is_tab_separated() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.tsv");
    let mut t = trainer(20, 1);
    let mut log = TrainLog::append(&path).unwrap();
    t.run(3, None, |r| log.write(r).unwrap()).unwrap();
    drop(log);
    let mut log = TrainLog::append(&path).unwrap();
    t.run(4, None, |r| log.write(r).unwrap()).unwrap();
    drop(log);
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], TrainLog::HEADER);
    assert_eq!(lines.len(), 5);
    assert!(lines[1..].iter().all(|l| l.split('\t').count() == 7));
    assert!(lines[4].starts_with("3\t"));
}

#[test]
fn config_validation() {
    let (model, data) = toy_training_setup(50, 3, 11);
    let bad = TrainConfig { batch_size: 0, ..TrainConfig::default() };
    assert!(Trainer::new(model.clone(), data, Schedule::paper(), bad).is_err());
    assert!(Trainer::new(model, vec![], Schedule::paper(), TrainConfig::default()).is_err());
}

#[test]
fn match_cosine_is_a_cosine() {
    let m = crate::fixtures::tiny_model(3, 1);
    let batch = crate::fixtures::tiny_batch(&m);
    let c = match_cosine(&m, &batch).unwrap().unwrap();
    assert!(c > 0.0 && c <= 1.0 + 1e-12, "{c}");
    assert_eq!(match_cosine(&crate::fixtures::tiny_model(1, 1), &batch).unwrap(), None);
}
