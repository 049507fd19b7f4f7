//! Small joint-training fixtures.

use zeroal::d2ulo::{train_joint, JointInputs, JointReport, Phase};
use zeroal::pipeline::{desk_joint, prepare, sample_stage, DataConfig};
use zeroal::usample::SampleConfig;
use zeroal::JointConfig;

pub fn tiny_joint(k: usize, epochs: usize) -> JointConfig {
    let mut cfg = desk_joint();
    cfg.k = k;
    cfg.epochs = epochs;
    cfg.pretrain_steps = 20;
    cfg.deepsets_inner_epochs = 2;
    cfg.adapt.feature_hidden = vec![8];
    cfg.adapt.embed_dim = 4;
    cfg.adapt.classifier_hidden = vec![4];
    cfg.adapt.discriminator_hidden = vec![4];
    cfg.deepsets.hidden = 8;
    cfg.deepsets.set_dim = 8;
    cfg
}

pub fn run_tiny(cfg: &JointConfig, seed: u64) -> JointReport {
    let mut data = DataConfig::default();
    data.params.n_source = 300;
    data.params.n_target = 100;
    data.params.n_test = 100;
    data.utility_pool_size = 100;
    data.utility_val_size = 100;
    let prep = prepare(&data, seed).unwrap();
    let scfg = SampleConfig {
        n_records: 30,
        min_size: 2,
        ..SampleConfig::default()
    };
    let sds = sample_stage(&prep, &scfg, seed).unwrap();
    let inputs = JointInputs {
        source_x: prep.pair.source.features(),
        source_y: prep.pair.source.labels().unwrap(),
        target_x: prep.pair.target_pool().features(),
        utility_pool_x: prep.utility_pool.features(),
        utilities: &sds,
        n_classes: prep.pair.source.n_classes(),
    };
    train_joint(&inputs, cfg, seed).map_err(|f| f.error).unwrap().1
}

/// DA steps logged between consecutive DeepSets phases.
pub fn da_steps_per_utility_phase(report: &JointReport) -> Vec<usize> {
    let mut out = Vec::new();
    let mut run = 0;
    for &(phase, n) in &report.phases {
        match phase {
            Phase::Adapt => run += n,
            Phase::DeepSets => {
                out.push(run);
                run = 0;
            }
            _ => {}
        }
    }
    out
}
