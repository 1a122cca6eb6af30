use std::path::Path;
use std::sync::Arc;

use twinlatent::gan::{GanConfig, GanModel, Part};
use twinlatent::losses::LossConfig;
use twinlatent::oracle::OracleWorldSpec;
use twinlatent::providers::{self, ToyCnn, ToyCnnConfig, ToyEmbedder, ToyPose};
use twinlatent::training::{
    measure_disentanglement, read_metrics, train, AuxModels, OracleSource, TrainConfig, TrainOutput, TrainState,
};

fn small_gan() -> GanConfig {
    GanConfig {
        n_z: 8,
        n_w: 16,
        mapping_layers: 1,
        synthesis_widths: vec![8, 8, 8, 4],
        discriminator_widths: vec![4, 8, 8],
        ..GanConfig::default()
    }
}

fn small_train(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 2,
        checkpoint_interval: 2,
        prefetch: 0,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn oracle_aux() -> (AuxModels, Arc<OracleSource>) {
    let world = providers::oracle_world(&OracleWorldSpec::default()).unwrap();
    let aux = AuxModels {
        embedder: providers::embedder(providers::ORACLE, &world, None).unwrap(),
        pose: providers::pose_estimator(providers::ORACLE, &world, None).unwrap(),
    };
    (aux, Arc::new(OracleSource::new(world, 11)))
}

fn toy_aux() -> AuxModels {
    let cfg = |out_dim| ToyCnnConfig {
        widths: vec![4, 4],
        out_dim,
        ..ToyCnnConfig::default()
    };
    AuxModels {
        embedder: Arc::new(ToyEmbedder::new(ToyCnn::new(cfg(8), 1).unwrap())),
        pose: Arc::new(ToyPose::new(ToyCnn::new(cfg(3), 2).unwrap()).unwrap()),
    }
}

fn run(dir: &Path, steps: u64, loss: &LossConfig, aux: &AuxModels, resume: Option<&Path>) -> TrainState {
    let (_, source) = oracle_aux();
    train(small_gan(), &small_train(steps), loss, aux, source, &TrainOutput::new(dir), resume).unwrap()
}

fn checksums(model: &GanModel) -> Vec<String> {
    Part::ALL.iter().map(|p| model.store(*p).checksum().unwrap()).collect()
}

#[test]
fn one_step_writes_one_metrics_row_and_a_final_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (aux, _) = oracle_aux();
    let state = run(dir.path(), 1, &LossConfig::default(), &aux, None);
    assert_eq!(state.step, 1);
    let out = TrainOutput::new(dir.path());
    let rows = read_metrics(&out.metrics()).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].step, 1);
    assert!(out.final_checkpoint().exists());
    assert!(GanModel::load(&out.final_checkpoint()).is_ok());
}

#[test]
fn training_is_deterministic() {
    let (aux, _) = oracle_aux();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sa = run(a.path(), 3, &LossConfig::default(), &aux, None);
    let sb = run(b.path(), 3, &LossConfig::default(), &aux, None);
    let ma = read_metrics(&TrainOutput::new(a.path()).metrics()).unwrap();
    let mb = read_metrics(&TrainOutput::new(b.path()).metrics()).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(checksums(&sa.model), checksums(&sb.model));
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let (aux, _) = oracle_aux();
    let full = tempfile::tempdir().unwrap();
    let whole = run(full.path(), 4, &LossConfig::default(), &aux, None);

    let part = tempfile::tempdir().unwrap();
    run(part.path(), 2, &LossConfig::default(), &aux, None);
    let ckpt = TrainOutput::new(part.path()).final_checkpoint();
    let resumed = run(part.path(), 4, &LossConfig::default(), &aux, Some(&ckpt));

    assert_eq!(resumed.step, 4);
    assert_eq!(checksums(&whole.model), checksums(&resumed.model));
    let ma = read_metrics(&TrainOutput::new(full.path()).metrics()).unwrap();
    let mb = read_metrics(&TrainOutput::new(part.path()).metrics()).unwrap();
    assert_eq!(ma, mb);
}

#[test]
fn interval_checkpoints_resume_too() {
    let (aux, _) = oracle_aux();
    let full = tempfile::tempdir().unwrap();
    let whole = run(full.path(), 3, &LossConfig::default(), &aux, None);
    let ckpt = TrainOutput::new(full.path()).step_checkpoint(2);
    assert!(ckpt.exists());
    let again = tempfile::tempdir().unwrap();
    let resumed = run(again.path(), 3, &LossConfig::default(), &aux, Some(&ckpt));
    assert_eq!(checksums(&whole.model), checksums(&resumed.model));
}

#[test]
fn zero_aux_weight_ignores_the_auxiliary_models() {
    let loss = LossConfig {
        lambda_aux: 0.0,
        ..LossConfig::default()
    };
    let (oracle, _) = oracle_aux();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sa = run(a.path(), 2, &loss, &oracle, None);
    let sb = run(b.path(), 2, &loss, &toy_aux(), None);
    assert_eq!(checksums(&sa.model), checksums(&sb.model));
    let rows = read_metrics(&TrainOutput::new(a.path()).metrics()).unwrap();
    for r in rows {
        assert_eq!(r.g_total, r.g_loss);
    }
}

#[test]
fn auxiliary_models_stay_frozen() {
    let aux = toy_aux();
    let before = (aux.embedder.checksum().unwrap(), aux.pose.checksum().unwrap());
    let dir = tempfile::tempdir().unwrap();
    run(dir.path(), 2, &LossConfig::default(), &aux, None);
    assert_eq!(before, (aux.embedder.checksum().unwrap(), aux.pose.checksum().unwrap()));
}

#[test]
fn auxiliary_weight_changes_the_generator_only() {
    let (aux, _) = oracle_aux();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sa = run(a.path(), 1, &LossConfig::default(), &aux, None);
    let loss = LossConfig {
        lambda_aux: 0.0,
        ..LossConfig::default()
    };
    let sb = run(b.path(), 1, &loss, &aux, None);
    // The first discriminator update precedes any generator change, so it
    // cannot depend on the auxiliary weight.
    assert_eq!(
        sa.model.store(Part::Discriminator).checksum().unwrap(),
        sb.model.store(Part::Discriminator).checksum().unwrap()
    );
    assert_ne!(
        sa.model.store(Part::Synthesis).checksum().unwrap(),
        sb.model.store(Part::Synthesis).checksum().unwrap()
    );
}

#[test]
fn resume_rejects_a_different_architecture() {
    let (aux, source) = oracle_aux();
    let dir = tempfile::tempdir().unwrap();
    run(dir.path(), 1, &LossConfig::default(), &aux, None);
    let ckpt = TrainOutput::new(dir.path()).final_checkpoint();
    let other = GanConfig {
        n_z: 4,
        ..small_gan()
    };
    let out = tempfile::tempdir().unwrap();
    let r = train(other, &small_train(2), &LossConfig::default(), &aux, source, &TrainOutput::new(out.path()), Some(&ckpt));
    assert!(r.is_err());
}

#[test]
fn disentanglement_report_is_well_formed() {
    let (aux, _) = oracle_aux();
    let model = GanModel::new(small_gan(), 3).unwrap();
    let r = measure_disentanglement(&model, &aux, 7, 1).unwrap();
    assert_eq!(r.n_triplets, 7);
    for v in [r.mean_theta_same, r.mean_theta_diff] {
        assert!((0.0..=std::f64::consts::PI).contains(&v));
    }
    assert!(r.mean_pose_dist_same_pose >= 0.0 && r.mean_pose_dist_same_identity >= 0.0);
    assert_eq!(r, measure_disentanglement(&model, &aux, 7, 1).unwrap());
}
