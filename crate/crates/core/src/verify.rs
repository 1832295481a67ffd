//! Finite-difference audit of the tape primitives and of a whole network.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{grad_check_inputs, relative_error, BnState, Mode, Tape, Var};
use crate::error::Result;
use crate::network::{build_model, ModelState, NetworkConfig, Partition};
use crate::tensor::Tensor;

pub const FD_EPS: f64 = 1e-4;
pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;
pub const NETWORK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Probes dropped because the difference interval crossed a ReLU kink.
    pub skipped: usize,
}

impl CheckLine {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub lines: Vec<CheckLine>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(CheckLine::passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            let verdict = if l.passed() { "ok" } else { "FAIL" };
            s.push_str(&format!(
                "{:<16} trials={:<3} max_rel_err={:.3e} tol={:.0e} kink_skips={} {verdict}\n",
                l.name, l.trials, l.max_rel_error, l.tolerance, l.skipped
            ));
        }
        s
    }
}

/// Weighted sum of `out` with fixed random weights, so every output
/// element carries a distinct upstream gradient.
fn project(tape: &mut Tape<f64>, out: Var, rng_seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let w = Tensor::randn(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(rng_seed));
    let r = tape.constant(w);
    let p = tape.mul(out, r)?;
    tape.sum(p)
}

fn away_from_zero(t: Tensor<f64>) -> Tensor<f64> {
    t.map(|v| if v.abs() < 0.05 { v + 0.1f64.copysign(v) } else { v })
}

fn worst(errs: Vec<f64>) -> f64 {
    errs.into_iter().fold(0.0, f64::max)
}

/// One randomized trial of the named primitive; returns the worst relative
/// error over all of its inputs.
fn primitive_trial(name: &str, seed: u64) -> Result<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = r.random_range(2..=3);
    let c = r.random_range(1..=4);
    let h = r.random_range(3..=7);
    let w = r.random_range(3..=7);
    let x = Tensor::randn(&[n, c, h, w], 1.0, &mut r);
    let ps = seed ^ 0x5ca1e;
    let errs = match name {
        "conv2d" => {
            let co = r.random_range(1..=4);
            let kern = if r.random_bool(0.5) { 3 } else { 1 };
            let stride = r.random_range(1..=2);
            let pad = r.random_range(0..=kern / 2);
            let wt = Tensor::randn(&[co, c, kern, kern], 0.5, &mut r);
            let b = Tensor::randn(&[co], 0.5, &mut r);
            grad_check_inputs(
                |t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                    project(t, y, ps)
                },
                &[x, wt, b],
                FD_EPS,
            )?
        }
        "batch_norm" => {
            let g = Tensor::uniform(&[c], 0.5, 1.5, &mut r);
            let b = Tensor::randn(&[c], 1.0, &mut r);
            grad_check_inputs(
                |t, v| {
                    let mut st = BnState::new(c);
                    let y = t.batch_norm(v[0], v[1], v[2], &mut st, Mode::Train)?;
                    project(t, y, ps)
                },
                &[x, g, b],
                FD_EPS,
            )?
        }
        "relu" => grad_check_inputs(
            |t, v| {
                let y = t.relu(v[0])?;
                project(t, y, ps)
            },
            &[away_from_zero(x)],
            FD_EPS,
        )?,
        "gap" => grad_check_inputs(
            |t, v| {
                let y = t.global_avg_pool(v[0])?;
                project(t, y, ps)
            },
            &[x],
            FD_EPS,
        )?,
        "linear" => {
            let (fi, fo) = (r.random_range(1..=8), r.random_range(1..=6));
            let xs = Tensor::randn(&[n, fi], 1.0, &mut r);
            let wt = Tensor::randn(&[fo, fi], 1.0, &mut r);
            let b = Tensor::randn(&[fo], 1.0, &mut r);
            grad_check_inputs(
                |t, v| {
                    let y = t.linear(v[0], v[1], v[2])?;
                    project(t, y, ps)
                },
                &[xs, wt, b],
                FD_EPS,
            )?
        }
        "softmax_ce" => {
            let k = r.random_range(2..=6);
            let logits = Tensor::randn(&[n, k], 2.0, &mut r);
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
            grad_check_inputs(|t, v| t.softmax_cross_entropy(v[0], &labels), &[logits], FD_EPS)?
        }
        "channel_affine" => {
            let g = Tensor::randn(&[c], 1.0, &mut r);
            let b = Tensor::randn(&[c], 1.0, &mut r);
            grad_check_inputs(
                |t, v| {
                    let y = t.channel_affine(v[0], v[1], v[2])?;
                    project(t, y, ps)
                },
                &[x, g, b],
                FD_EPS,
            )?
        }
        other => unreachable!("unknown primitive {other}"),
    };
    Ok(worst(errs))
}

pub const PRIMITIVES: [&str; 7] = ["conv2d", "batch_norm", "relu", "gap", "linear", "softmax_ce", "channel_affine"];

/// `trials` randomized checks of every differentiable primitive.
pub fn check_primitives(trials: usize, seed: u64) -> Result<Vec<CheckLine>> {
    PRIMITIVES
        .iter()
        .enumerate()
        .map(|(pi, name)| {
            let mut max = 0.0f64;
            for t in 0..trials {
                max = max.max(primitive_trial(name, seed.wrapping_add((pi as u64) << 32 | t as u64))?);
            }
            Ok(CheckLine {
                name: (*name).to_string(),
                trials,
                max_rel_error: max,
                tolerance: PRIMITIVE_TOLERANCE,
                skipped: 0,
            })
        })
        .collect()
}

/// Train-mode cross-entropy of a freshly built `config` network on a random
/// batch of `batch` images, differentiated with respect to every parameter
/// and compared with central differences on `coords` sampled coordinates
/// per trial.
pub fn check_network(config: &NetworkConfig, batch: usize, coords: usize, trials: usize, seed: u64) -> Result<CheckLine> {
    let all = [Partition::Backbone, Partition::Ftm, Partition::Head];
    let mut max = 0.0f64;
    let mut kinks = 0;
    for t in 0..trials {
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ (t as u64).wrapping_mul(0x9e37_79b9));
        let mut model = build_model::<f64>(config, r.random())?;
        // move FTM away from identity so its gradients are generic
        for (name, p) in model.params_mut().iter_mut() {
            if name.contains(".ftm.") {
                p.data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.2..0.2));
            }
        }
        let s = config.image_size;
        let x = Tensor::uniform(&[batch, config.input_channels, s, s], 0.0, 1.0, &mut r);
        let labels: Vec<usize> = (0..batch).map(|_| r.random_range(0..config.num_classes)).collect();

        let loss_at = |m: &ModelState<f64>| -> Result<(f64, Vec<bool>)> {
            let mut m = m.clone();
            let mut tape = Tape::new();
            let tr = m.forward_on(&mut tape, &x, Mode::Train, &[])?;
            let l = tape.softmax_cross_entropy(tr.logits, &labels)?;
            Ok((tape.value(l).data()[0], tape.relu_pattern()))
        };

        let mut probe = model.clone();
        let mut tape = Tape::new();
        let tr = probe.forward_on(&mut tape, &x, Mode::Train, &all)?;
        let loss = tape.softmax_cross_entropy(tr.logits, &labels)?;
        let base_pattern = tape.relu_pattern();
        let grads = tape.backward(loss)?;

        let names: Vec<String> = model.params().keys().cloned().collect();
        let sizes: Vec<usize> = names.iter().map(|n| model.params()[n].len()).collect();
        let total: usize = sizes.iter().sum();
        let mut checked = 0;
        for flat in sample(&mut r, total, (4 * coords).min(total)).into_vec() {
            if checked == coords {
                break;
            }
            let (mut pi, mut off) = (0, flat);
            while off >= sizes[pi] {
                off -= sizes[pi];
                pi += 1;
            }
            let name = &names[pi];
            let analytic = grads.get(tr.params[name]).map_or(0.0, |g| g.data()[off]);
            let orig = model.params()[name].data()[off];
            let mut at = |v: f64| {
                model.params_mut().get_mut(name).expect("known name").data_mut()[off] = v;
                loss_at(&model)
            };
            let (hi, hi_pat) = at(orig + FD_EPS)?;
            let (lo, lo_pat) = at(orig - FD_EPS)?;
            at(orig)?;
            // a ReLU input changing sign inside the probe interval puts a
            // kink between the two samples
            if hi_pat != base_pattern || lo_pat != base_pattern {
                kinks += 1;
                continue;
            }
            checked += 1;
            max = max.max(relative_error(analytic, (hi - lo) / (2.0 * FD_EPS)));
        }
    }
    Ok(CheckLine {
        name: "network".into(),
        trials,
        max_rel_error: max,
        tolerance: NETWORK_TOLERANCE,
        skipped: kinks,
    })
}

/// Every primitive plus the desk network, `trials` seeded trials each.
pub fn run_gradcheck(trials: usize, seed: u64) -> Result<GradcheckReport> {
    let mut lines = check_primitives(trials, seed)?;
    lines.push(check_network(&NetworkConfig::desk(), 2, 12, trials, seed)?);
    Ok(GradcheckReport { lines })
}
