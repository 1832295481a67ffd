use super::stages::{adapt_ftm, finetune_baseline, frozen_source_accuracy, predict, prepare_target_model};
use super::{sample_shots, StageConfig};
use crate::data::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::metrics::mean_std;
use crate::network::ModelState;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub shots: Vec<usize>,
    pub trials: usize,
    pub ftm: StageConfig,
    pub finetune: StageConfig,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            shots: vec![3, 5, 10, 15, 20, 30, 50],
            trials: 5,
            ftm: StageConfig::ftm(),
            finetune: StageConfig::finetune(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub shots: usize,
    /// `FT` or `FTM`.
    pub method: &'static str,
    /// Target test accuracy of each trial.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Unadapted source model on the target test split.
    pub frozen_accuracy: Option<f64>,
}

impl SweepReport {
    /// `shots,method,mean_acc,std_acc`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("shots,method,mean_acc,std_acc\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.shots, r.method, r.mean, r.std));
        }
        s
    }

    /// `shots,method,trial,acc`, one line per trial.
    pub fn trials_csv(&self) -> String {
        let mut s = String::from("shots,method,trial,acc\n");
        for r in &self.rows {
            for (t, a) in r.accuracies.iter().enumerate() {
                s.push_str(&format!("{},{},{t},{a}\n", r.shots, r.method));
            }
        }
        s
    }

    pub fn row(&self, shots: usize, method: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.shots == shots && r.method == method)
    }
}

fn mix(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ c.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// For every shot count and trial: draw a fresh episode and head seed,
/// adapt a copy of `source_model` with FT and with FTM from the same
/// starting point, and score both on the target test split.
pub fn run_shot_sweep(source_model: &ModelState, target: &LabeledDataset, cfg: &SweepConfig) -> Result<SweepReport> {
    if cfg.trials == 0 || cfg.shots.is_empty() {
        return Err(Error::config("a sweep needs at least one shot count and one trial"));
    }
    let test = target.split(Split::Test);
    if test.is_empty() {
        return Err(Error::Data("target test split is empty".into()));
    }
    let truth: Vec<usize> = test.iter().map(|it| it.label).collect();
    let score = |m: &ModelState| -> Result<f64> {
        let preds = predict(m, &test)?;
        Ok(preds.iter().zip(&truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64)
    };
    let mut rows = Vec::new();
    for &k in &cfg.shots {
        let mut ft = Vec::with_capacity(cfg.trials);
        let mut ftm = Vec::with_capacity(cfg.trials);
        for t in 0..cfg.trials {
            let trial_seed = mix(cfg.seed, k as u64, t as u64);
            let episode = sample_shots(target, k, trial_seed)?;
            let start = prepare_target_model(source_model, target.num_classes(), trial_seed ^ 0x4ead)?;
            let ft_cfg = StageConfig {
                seed: trial_seed,
                ..cfg.finetune.clone()
            };
            let (m, _) = finetune_baseline(&start, &episode, &[], &ft_cfg)?;
            ft.push(score(&m)?);
            let ftm_cfg = StageConfig {
                seed: trial_seed,
                ..cfg.ftm.clone()
            };
            let (m, _) = adapt_ftm(&start, &episode, &[], &ftm_cfg)?;
            ftm.push(score(&m)?);
        }
        for (method, accs) in [("FT", ft), ("FTM", ftm)] {
            let (mean, std) = mean_std(&accs);
            rows.push(SweepRow {
                shots: k,
                method,
                accuracies: accs,
                mean,
                std,
            });
        }
    }
    let frozen_accuracy = match target.source_family {
        Some(_) => Some(frozen_source_accuracy(source_model, target, Split::Test)?),
        None => None,
    };
    Ok(SweepReport { rows, frozen_accuracy })
}
