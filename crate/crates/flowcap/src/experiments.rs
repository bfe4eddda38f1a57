//! Experiment drivers with machine-readable outputs.
//!
//! Every run is fully determined by its config plus a seed: data generation,
//! initialization, and batch order all draw from substreams of one seeded
//! generator, so re-running a config reproduces the metrics byte for byte.
//! Each run emits a config echo, a per-epoch `metrics.csv`
//! (`epoch,train_loss,test_loss`), a `summary.json`, and a serialized model.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::construct::{cap_field, lookup, Homeomorphism};
use crate::error::{Error, Result};
use crate::iresnet::IResNet;
use crate::nn::{Activation, Mlp, SgdMomentum};
use crate::odenet::{LossTail, MseTail, OdeBlock, OdeField, TwoPartTail};
use crate::rng::Rng;
use crate::serialize;
use crate::tensor::{self, Tensor};

// -- Configuration ------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    #[serde(default)]
    pub seed: Option<u64>,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub out_dir: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub train_size: usize,
    pub test_size: usize,
    /// Per-dimension sampling bounds; experiments fall back to their natural
    /// domain when omitted.
    #[serde(default)]
    pub bounds: Option<Vec<[f64; 2]>>,
    /// Registered map name used as the regression target (sweep experiments).
    #[serde(default)]
    pub target: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Number of zero channels appended to inputs.
    #[serde(default)]
    pub augment: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub bias: bool,
    #[serde(default = "default_spectral_c")]
    pub spectral_c: f64,
    #[serde(default = "default_power_iters")]
    pub power_iters: usize,
    /// RK4 steps for ODE models.
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Augmentation counts visited by sweep experiments.
    #[serde(default)]
    pub sweep_augments: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

fn default_blocks() -> usize {
    5
}
fn default_activation() -> Activation {
    Activation::Tanh
}
fn default_spectral_c() -> f64 {
    0.9
}
fn default_power_iters() -> usize {
    1
}
fn default_steps() -> usize {
    100
}
fn default_momentum() -> f64 {
    0.9
}

/// Explicit seed, then the FLOWCAP_SEED environment fallback, then 42.
pub fn resolve_seed(explicit: Option<u64>) -> u64 {
    explicit
        .or_else(|| {
            std::env::var("FLOWCAP_SEED")
                .ok()
                .and_then(|s| s.parse().ok())
        })
        .unwrap_or(42)
}

// -- Metrics ------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
}

#[derive(Clone, Debug)]
pub struct MetricsLog {
    pub experiment: String,
    pub seed: u64,
    pub rows: Vec<EpochRow>,
    /// Final test MSE, one entry per model output.
    pub final_test_mse: Vec<f64>,
    pub mean_test_mse: f64,
    pub extras: BTreeMap<String, f64>,
    pub wall_seconds: f64,
}

fn fmt(v: f64) -> String {
    format!("{:.16e}", v)
}

impl MetricsLog {
    pub fn csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,test_loss\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{}\n",
                row.epoch,
                fmt(row.train_loss),
                fmt(row.test_loss)
            ));
        }
        out
    }

    pub fn summary_json(&self) -> String {
        let mut out = format!(
            "{{\"experiment\":{:?},\"seed\":{},\"final_test_mse\":[",
            self.experiment, self.seed
        );
        for (i, v) in self.final_test_mse.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&fmt(*v));
        }
        out.push_str(&format!(
            "],\"mean_test_mse\":{},\"wall_seconds\":{}",
            fmt(self.mean_test_mse),
            fmt(self.wall_seconds)
        ));
        if !self.extras.is_empty() {
            out.push_str(",\"extras\":{");
            for (i, (k, v)) in self.extras.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&format!("{:?}:{}", k, fmt(*v)));
            }
            out.push('}');
        }
        out.push('}');
        out
    }
}

/// Everything a run produces: per-subrun metrics plus named output files.
pub struct RunOutput {
    pub runs: Vec<MetricsLog>,
    pub files: Vec<(String, String)>,
}

impl RunOutput {
    pub fn primary(&self) -> &MetricsLog {
        &self.runs[0]
    }
}

// -- Shared helpers -----------------------------------------------------------

fn uniform_samples(rng: &mut Rng, n: usize, bounds: &[(f64, f64)]) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| bounds.iter().map(|(lo, hi)| rng.range(*lo, *hi)).collect())
        .collect()
}

fn lift(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    out.extend(std::iter::repeat(0.0).take(d));
    out
}

fn column_batch(data: &[Vec<f64>], idx: &[usize]) -> Tensor {
    let cols: Vec<Vec<f64>> = idx.iter().map(|&i| data[i].clone()).collect();
    Tensor::from_columns(&cols).expect("non-empty batch")
}

fn per_output_mse(outputs: &Tensor, targets: &Tensor) -> Vec<f64> {
    let (rows, cols) = (outputs.rows(), outputs.cols());
    (0..rows)
        .map(|i| {
            (0..cols)
                .map(|j| {
                    let d = outputs.at(i, j) - targets.at(i, j);
                    d * d
                })
                .sum::<f64>()
                / cols as f64
        })
        .collect()
}

fn bounds_or(spec: &DatasetSpec, fallback: &[(f64, f64)]) -> Vec<(f64, f64)> {
    match &spec.bounds {
        Some(b) => b.iter().map(|[lo, hi]| (*lo, *hi)).collect(),
        None => fallback.to_vec(),
    }
}

fn check_finite(loss: f64, epoch: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::TrainingDiverged(epoch));
    }
    Ok(())
}

// -- Residual-stack negation --------------------------------------------------

/// Train a spectrally normalized residual stack to negate its input, with
/// `augment` extra zero channels. Reports per-output test MSE and the fitted
/// slope of the learned scalar map.
pub fn run_negation_iresnet(config: &ExperimentConfig) -> Result<RunOutput> {
    let start = Instant::now();
    let d = config.model.augment;
    if d > 1 {
        return Err(Error::Config(format!(
            "negation-iresnet supports augment 0 or 1, got {d}"
        )));
    }
    let width = 1 + d;
    let seed = resolve_seed(config.seed);
    let mut rng = Rng::new(seed);
    let mut data_rng = rng.split();
    let mut init_rng = rng.split();
    let mut shuffle_rng = rng.split();

    let bounds = bounds_or(&config.dataset, &[(-10.0, 10.0)]);
    let train_x = uniform_samples(&mut data_rng, config.dataset.train_size, &bounds);
    let test_x = uniform_samples(&mut data_rng, config.dataset.test_size, &bounds);
    let inputs: Vec<Vec<f64>> = train_x.iter().map(|x| lift(x, d)).collect();
    let targets: Vec<Vec<f64>> = train_x.iter().map(|x| lift(&[-x[0]], d)).collect();
    let test_inputs: Vec<Vec<f64>> = test_x.iter().map(|x| lift(x, d)).collect();
    let test_targets: Vec<Vec<f64>> = test_x.iter().map(|x| lift(&[-x[0]], d)).collect();

    let c = config.model.spectral_c;
    let mut net = IResNet::trainable(
        width,
        config.model.blocks,
        &config.model.hidden,
        config.model.activation,
        config.model.bias,
        &mut init_rng,
    );
    net.normalize(c, 50);

    let mut opt = SgdMomentum::new(config.optimizer.learning_rate, config.optimizer.momentum);
    let test_in = Tensor::from_columns(&test_inputs).expect("test set non-empty");
    let test_tg = Tensor::from_columns(&test_targets).expect("test set non-empty");

    let mut rows = Vec::with_capacity(config.optimizer.epochs);
    let mut indices: Vec<usize> = (0..inputs.len()).collect();
    for epoch in 1..=config.optimizer.epochs {
        shuffle_rng.shuffle(&mut indices);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in indices.chunks(config.optimizer.batch_size) {
            let x = column_batch(&inputs, chunk);
            let y = column_batch(&targets, chunk);
            let mut tape = Tape::new();
            let binding = tape.bind(&net.store);
            let xv = tape.leaf(x);
            let yv = tape.leaf(y);
            let out = net.forward_on(&mut tape, &binding, xv)?;
            let loss = tape.mse(out, yv)?;
            let grads = tape.backward(loss)?;
            net.store.zero_grads();
            net.store.accumulate(&binding, &grads);
            opt.step(&mut net.store);
            net.normalize(c, config.model.power_iters);
            epoch_loss += tape.value(loss).item();
            batches += 1;
        }
        let train_loss = epoch_loss / batches as f64;
        check_finite(train_loss, epoch)?;
        let test_loss = tensor::mse(&net.forward(&test_in)?, &test_tg)?.item();
        rows.push(EpochRow {
            epoch,
            train_loss,
            test_loss,
        });
    }
    net.normalize(c, 50);

    let outputs = net.forward(&test_in)?;
    let final_test_mse = per_output_mse(&outputs, &test_tg);
    let mean = final_test_mse.iter().sum::<f64>() / final_test_mse.len() as f64;

    // Least-squares slope of the learned scalar map on the first output.
    let mut num = 0.0;
    let mut den = 0.0;
    for (j, x) in test_x.iter().enumerate() {
        num += outputs.at(0, j) * x[0];
        den += x[0] * x[0];
    }
    let mut extras = BTreeMap::new();
    extras.insert("fitted_slope".to_string(), num / den);

    let metrics = MetricsLog {
        experiment: config.experiment.clone(),
        seed,
        rows,
        final_test_mse,
        mean_test_mse: mean,
        extras,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    let files = vec![
        ("metrics.csv".to_string(), metrics.csv()),
        ("summary.json".to_string(), metrics.summary_json()),
        (
            "model.json".to_string(),
            serialize::iresnet_model_json(&net, c, config.model.power_iters)?,
        ),
    ];
    Ok(RunOutput {
        runs: vec![metrics],
        files,
    })
}

// -- ODE-block negation ---------------------------------------------------------

struct OdeTrainResult {
    block: OdeBlock,
    rows: Vec<EpochRow>,
    final_test_mse: Vec<f64>,
}

/// Train an ODE block against lifted targets `[h(x), 0^d]` with the two-part
/// loss (leading block toward the target, trailing block toward zero).
fn train_ode_regression(
    q_head: usize,
    d: usize,
    inputs: &[Vec<f64>],
    head_targets: &[Vec<f64>],
    test_inputs: &[Vec<f64>],
    test_head_targets: &[Vec<f64>],
    hidden: &[usize],
    activation: Activation,
    bias: bool,
    steps: usize,
    opt_spec: &OptimizerSpec,
    init_rng: &mut Rng,
    shuffle_rng: &mut Rng,
) -> Result<OdeTrainResult> {
    let q = q_head + d;
    let mut widths = vec![q];
    widths.extend_from_slice(hidden);
    widths.push(q);
    let net = Mlp::new("field", &widths, activation, bias);
    let mut store = crate::autodiff::ParamStore::new();
    net.init_params(&mut store, init_rng);
    let mut block = OdeBlock::new(OdeField::autonomous(net), 0.0, 1.0, steps, store);

    let mut opt = SgdMomentum::new(opt_spec.learning_rate, opt_spec.momentum);
    let test_in = Tensor::from_columns(test_inputs).expect("test set non-empty");
    let test_head = Tensor::from_columns(test_head_targets).expect("test set non-empty");

    let eval_loss = |block: &OdeBlock| -> Result<(f64, Tensor)> {
        let out = block.integrate(&test_in)?;
        let head = tensor::slice_rows(&out, 0, q_head)?;
        let mut loss = tensor::mse(&head, &test_head)?.item();
        if d > 0 {
            let tail = tensor::slice_rows(&out, q_head, d)?;
            loss += tensor::mse(&tail, &Tensor::zeros(tail.shape()))?.item();
        }
        Ok((loss, out))
    };

    let mut rows = Vec::with_capacity(opt_spec.epochs);
    let mut indices: Vec<usize> = (0..inputs.len()).collect();
    for epoch in 1..=opt_spec.epochs {
        shuffle_rng.shuffle(&mut indices);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in indices.chunks(opt_spec.batch_size) {
            let x = column_batch(inputs, chunk);
            let y = column_batch(head_targets, chunk);
            let tail = TwoPartTail {
                head: q_head,
                head_target: y,
            };
            block.store.zero_grads();
            let report = block.grad_through_solver(&x, &tail)?;
            opt.step(&mut block.store);
            epoch_loss += report.loss;
            batches += 1;
        }
        let train_loss = epoch_loss / batches as f64;
        check_finite(train_loss, epoch)?;
        let (test_loss, _) = eval_loss(&block)?;
        rows.push(EpochRow {
            epoch,
            train_loss,
            test_loss,
        });
    }

    let (_, outputs) = eval_loss(&block)?;
    let mut full_targets = Vec::with_capacity(test_inputs.len());
    for t in test_head_targets {
        full_targets.push(lift(t, d));
    }
    let full = Tensor::from_columns(&full_targets).expect("test set non-empty");
    let final_test_mse = per_output_mse(&outputs, &full);

    Ok(OdeTrainResult {
        block,
        rows,
        final_test_mse,
    })
}

pub fn run_negation_odenet(config: &ExperimentConfig) -> Result<RunOutput> {
    let start = Instant::now();
    let d = config.model.augment;
    if d > 1 {
        return Err(Error::Config(format!(
            "negation-odenet supports augment 0 or 1, got {d}"
        )));
    }
    let seed = resolve_seed(config.seed);
    let mut rng = Rng::new(seed);
    let mut data_rng = rng.split();
    let mut init_rng = rng.split();
    let mut shuffle_rng = rng.split();

    let bounds = bounds_or(&config.dataset, &[(-10.0, 10.0)]);
    let train_x = uniform_samples(&mut data_rng, config.dataset.train_size, &bounds);
    let test_x = uniform_samples(&mut data_rng, config.dataset.test_size, &bounds);
    let inputs: Vec<Vec<f64>> = train_x.iter().map(|x| lift(x, d)).collect();
    let heads: Vec<Vec<f64>> = train_x.iter().map(|x| vec![-x[0]]).collect();
    let test_inputs: Vec<Vec<f64>> = test_x.iter().map(|x| lift(x, d)).collect();
    let test_heads: Vec<Vec<f64>> = test_x.iter().map(|x| vec![-x[0]]).collect();

    let result = train_ode_regression(
        1,
        d,
        &inputs,
        &heads,
        &test_inputs,
        &test_heads,
        &config.model.hidden,
        config.model.activation,
        config.model.bias,
        config.model.steps,
        &config.optimizer,
        &mut init_rng,
        &mut shuffle_rng,
    )?;

    let mut extras = BTreeMap::new();
    if d > 0 {
        // Inverse recovery: reversed integration should return to the lifted
        // input; report the worst first-component residual on the test set.
        let test_in = Tensor::from_columns(&test_inputs).expect("non-empty");
        let forward = result.block.integrate(&test_in)?;
        let back = result.block.inverse(&forward)?;
        let mut worst = 0.0f64;
        for (j, x) in test_x.iter().enumerate() {
            worst = worst.max((back.at(0, j) - x[0]).abs());
        }
        extras.insert("inverse_residual_sup".to_string(), worst);
    }

    let mean =
        result.final_test_mse.iter().sum::<f64>() / result.final_test_mse.len() as f64;
    let metrics = MetricsLog {
        experiment: config.experiment.clone(),
        seed,
        rows: result.rows,
        final_test_mse: result.final_test_mse,
        mean_test_mse: mean,
        extras,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    let files = vec![
        ("metrics.csv".to_string(), metrics.csv()),
        ("summary.json".to_string(), metrics.summary_json()),
        (
            "model.json".to_string(),
            serialize::ode_model_json(&result.block, None),
        ),
    ];
    Ok(RunOutput {
        runs: vec![metrics],
        files,
    })
}

// -- Augmentation sweep ---------------------------------------------------------

/// One training run per augmentation count `d`, all from the same seed, on a
/// registered regression target. Emits a one-row-per-d summary table.
pub fn run_augmentation_sweep(config: &ExperimentConfig) -> Result<RunOutput> {
    let target_name = config
        .dataset
        .target
        .clone()
        .unwrap_or_else(|| "radial-swap".to_string());
    let h: Homeomorphism = lookup(&target_name)?;
    let p = h.dim;
    let seed = resolve_seed(config.seed);
    let ds = if config.model.sweep_augments.is_empty() {
        vec![0, 1, 2, 3, 4]
    } else {
        config.model.sweep_augments.clone()
    };
    let hidden = if config.model.hidden.is_empty() {
        vec![32]
    } else {
        config.model.hidden.clone()
    };

    let mut runs = Vec::new();
    let mut files = Vec::new();
    let mut table = String::from("d,final_train_loss,final_test_loss\n");
    for &d in &ds {
        let start = Instant::now();
        let mut rng = Rng::new(seed);
        let mut data_rng = rng.split();
        let mut init_rng = rng.split();
        let mut shuffle_rng = rng.split();

        let train_x: Vec<Vec<f64>> = (0..config.dataset.train_size)
            .map(|_| h.sample(&mut data_rng))
            .collect();
        let test_x: Vec<Vec<f64>> = (0..config.dataset.test_size)
            .map(|_| h.sample(&mut data_rng))
            .collect();
        let inputs: Vec<Vec<f64>> = train_x.iter().map(|x| lift(x, d)).collect();
        let heads: Vec<Vec<f64>> = train_x.iter().map(|x| h.apply(x)).collect();
        let test_inputs: Vec<Vec<f64>> = test_x.iter().map(|x| lift(x, d)).collect();
        let test_heads: Vec<Vec<f64>> = test_x.iter().map(|x| h.apply(x)).collect();

        let result = train_ode_regression(
            p,
            d,
            &inputs,
            &heads,
            &test_inputs,
            &test_heads,
            &hidden,
            config.model.activation,
            true,
            config.model.steps,
            &config.optimizer,
            &mut init_rng,
            &mut shuffle_rng,
        )?;

        let last = result.rows.last().expect("at least one epoch");
        table.push_str(&format!(
            "{},{},{}\n",
            d,
            fmt(last.train_loss),
            fmt(last.test_loss)
        ));
        let mean =
            result.final_test_mse.iter().sum::<f64>() / result.final_test_mse.len() as f64;
        let metrics = MetricsLog {
            experiment: format!("{}[d={}]", config.experiment, d),
            seed,
            rows: result.rows,
            final_test_mse: result.final_test_mse,
            mean_test_mse: mean,
            extras: BTreeMap::new(),
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        files.push((format!("metrics_d{d}.csv"), metrics.csv()));
        files.push((format!("summary_d{d}.json"), metrics.summary_json()));
        files.push((
            format!("model_d{d}.json"),
            serialize::ode_model_json(&result.block, None),
        ));
        runs.push(metrics);
    }
    files.push(("sweep.csv".to_string(), table));
    Ok(RunOutput { runs, files })
}

// -- Linear-capped regression ----------------------------------------------------

struct CappedTail {
    cap: Mlp,
    target: Tensor,
}

impl LossTail for CappedTail {
    fn build(
        &self,
        tape: &mut Tape,
        binding: &crate::autodiff::Binding,
        x_t: crate::autodiff::Var,
    ) -> Result<crate::autodiff::Var> {
        let out = self.cap.forward_on(tape, binding, x_t)?;
        let target = tape.leaf(self.target.clone());
        tape.mse(out, target)
    }
}

/// Train a width-2 ODE block plus a trainable linear readout to fit the
/// non-invertible scalar map x -> x^2.
pub fn run_cap_regression(config: &ExperimentConfig) -> Result<RunOutput> {
    let start = Instant::now();
    let seed = resolve_seed(config.seed);
    let mut rng = Rng::new(seed);
    let mut data_rng = rng.split();
    let mut init_rng = rng.split();
    let mut shuffle_rng = rng.split();

    let bounds = bounds_or(&config.dataset, &[(-2.0, 2.0)]);
    let square = |x: &[f64]| vec![x[0] * x[0]];
    let train_x = uniform_samples(&mut data_rng, config.dataset.train_size, &bounds);
    let test_x = uniform_samples(&mut data_rng, config.dataset.test_size, &bounds);

    let hidden = if config.model.hidden.is_empty() {
        vec![16]
    } else {
        config.model.hidden.clone()
    };
    let q = 2;
    let mut widths = vec![q];
    widths.extend_from_slice(&hidden);
    widths.push(q);
    let field_net = Mlp::new("field", &widths, config.model.activation, true);
    let cap = Mlp::new("cap", &[q, 1], Activation::Tanh, true);
    let mut store = crate::autodiff::ParamStore::new();
    field_net.init_params(&mut store, &mut init_rng);
    cap.init_params(&mut store, &mut init_rng);
    let mut block = OdeBlock::new(
        OdeField::autonomous(field_net),
        0.0,
        1.0,
        config.model.steps,
        store,
    );

    let inputs: Vec<Vec<f64>> = train_x.iter().map(|x| lift(x, 1)).collect();
    let targets: Vec<Vec<f64>> = train_x.iter().map(|x| square(x)).collect();
    let test_inputs: Vec<Vec<f64>> = test_x.iter().map(|x| lift(x, 1)).collect();
    let test_targets: Vec<Vec<f64>> = test_x.iter().map(|x| square(x)).collect();
    let test_in = Tensor::from_columns(&test_inputs).expect("non-empty");
    let test_tg = Tensor::from_columns(&test_targets).expect("non-empty");

    let mut opt = SgdMomentum::new(config.optimizer.learning_rate, config.optimizer.momentum);
    let eval_test = |block: &OdeBlock| -> Result<f64> {
        let out = block.integrate(&test_in)?;
        let read = cap.eval(&block.store, &out)?;
        Ok(tensor::mse(&read, &test_tg)?.item())
    };

    let mut rows = Vec::with_capacity(config.optimizer.epochs);
    let mut indices: Vec<usize> = (0..inputs.len()).collect();
    for epoch in 1..=config.optimizer.epochs {
        shuffle_rng.shuffle(&mut indices);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in indices.chunks(config.optimizer.batch_size) {
            let x = column_batch(&inputs, chunk);
            let y = column_batch(&targets, chunk);
            let tail = CappedTail {
                cap: cap.clone(),
                target: y,
            };
            block.store.zero_grads();
            let report = block.grad_through_solver(&x, &tail)?;
            opt.step(&mut block.store);
            epoch_loss += report.loss;
            batches += 1;
        }
        let train_loss = epoch_loss / batches as f64;
        check_finite(train_loss, epoch)?;
        rows.push(EpochRow {
            epoch,
            train_loss,
            test_loss: eval_test(&block)?,
        });
    }

    let final_mse = eval_test(&block)?;

    // The zero-padded analytic field with the fixed extraction readout
    // reproduces the target exactly; record it as a baseline.
    let analytic = cap_field(Arc::new(square), 1, 1);
    let cap_matrix = analytic.extraction_cap();
    let mut analytic_sq_err = 0.0;
    for x in test_x.iter().take(20) {
        let end = analytic.integrate(x, 10)?;
        let read = tensor::matmul(&cap_matrix, &Tensor::vector(&end))?;
        let want = square(x)[0];
        analytic_sq_err += (read.data()[0] - want) * (read.data()[0] - want);
    }
    let mut extras = BTreeMap::new();
    extras.insert("analytic_cap_mse".to_string(), analytic_sq_err / 20.0);

    let metrics = MetricsLog {
        experiment: config.experiment.clone(),
        seed,
        rows,
        final_test_mse: vec![final_mse],
        mean_test_mse: final_mse,
        extras,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    let files = vec![
        ("metrics.csv".to_string(), metrics.csv()),
        ("summary.json".to_string(), metrics.summary_json()),
        (
            "model.json".to_string(),
            serialize::ode_model_json(&block, Some(&cap)),
        ),
    ];
    Ok(RunOutput {
        runs: vec![metrics],
        files,
    })
}

// -- Dispatch -------------------------------------------------------------------

pub const EXPERIMENTS: &[&str] = &[
    "negation-iresnet",
    "negation-odenet",
    "augmentation-sweep",
    "cap-regression",
];

pub fn run(config: &ExperimentConfig) -> Result<RunOutput> {
    match config.experiment.as_str() {
        "negation-iresnet" => run_negation_iresnet(config),
        "negation-odenet" => run_negation_odenet(config),
        "augmentation-sweep" => run_augmentation_sweep(config),
        "cap-regression" => run_cap_regression(config),
        other => Err(Error::UnknownExperiment {
            name: other.to_string(),
            available: EXPERIMENTS.join(", "),
        }),
    }
}

/// Run and persist: config echo (with the resolved seed), metrics, summary,
/// and model files, all written atomically under `out_dir`.
pub fn run_to_dir(config: &ExperimentConfig, out_dir: &Path) -> Result<RunOutput> {
    let output = run(config)?;
    let mut echo = config.clone();
    echo.seed = Some(resolve_seed(config.seed));
    let echo_json =
        serde_json::to_string_pretty(&echo).map_err(|e| Error::Config(e.to_string()))?;
    serialize::write_atomic(&out_dir.join("config.json"), &echo_json)?;
    for (name, contents) in &output.files {
        serialize::write_atomic(&out_dir.join(name), contents)?;
    }
    Ok(output)
}

#[cfg(test)]
mod tests;
