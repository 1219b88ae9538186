//! Mini-batch SGD with momentum, latent-weight clipping, geometry audits and
//! finite-difference gradient checking.

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::geometry::{activation_mask, geometry_report};
use crate::init::InitConfig;
use crate::layers::{argmax_columns, Mode, SoftmaxCrossEntropy};
use crate::network::{ArchSpec, Network, Param};
use crate::rng::Rng;
use crate::tensor::Matrix;

const EVAL_CHUNK: usize = 1024;
const GRADCHECK_STREAM: u64 = 0x6752_4144;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `factor` after every `every` epochs.
    StepDecay {
        factor: f64,
        every: usize,
    },
}

impl LrSchedule {
    /// Learning rate used during `epoch` (1-based).
    pub fn rate(&self, base: f64, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::StepDecay { factor, every } => {
                base * factor.powi((epoch.saturating_sub(1) / every.max(1)) as i32)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_binary_weights: bool,
    pub lr_schedule: LrSchedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 10,
            batch_size: 32,
            clip_binary_weights: true,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must be in [0, 1)"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch size must be at least 2"));
        }
        if let LrSchedule::StepDecay { factor, every } = self.lr_schedule {
            if factor.is_nan() || factor <= 0.0 || every == 0 {
                return Err(Error::config(
                    "step decay needs a positive factor and period",
                ));
            }
        }
        Ok(())
    }
}

/// Which hidden layers are audited, and how often.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AuditConfig {
    /// Audit every `every` epochs in addition to epoch 0; 0 audits initialization only.
    pub every: usize,
    /// Audit every hidden block instead of the first one only.
    pub all_layers: bool,
}

/// Condensed geometry statistics of one hidden block.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryDigest {
    pub layer: usize,
    pub correlation: f64,
    pub mean_jaccard: f64,
    pub mean_count: f64,
    pub mean_plane_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_error_rate: f64,
    pub geometry: Vec<GeometryDigest>,
}

/// Classical momentum: `v = μ v + g`, `θ -= lr v`; latent binary weights are
/// then clamped to `[-1, 1]` when clipping is enabled.
///
/// `velocity` is allocated on first use.
pub fn sgd_step(
    params: &mut [Param<'_>],
    velocity: &mut Vec<Matrix>,
    lr: f64,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if velocity.is_empty() {
        *velocity = params
            .iter()
            .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect();
    }
    if velocity.len() != params.len() {
        return Err(Error::usage("velocity does not match parameter list"));
    }
    for (p, v) in params.iter_mut().zip(velocity.iter_mut()) {
        if p.value.shape() != p.grad.shape() || v.shape() != p.value.shape() {
            return Err(Error::shape("sgd_step", p.value.shape(), p.grad.shape()));
        }
        let clip = cfg.clip_binary_weights && p.binary_latent;
        for ((theta, vel), g) in p
            .value
            .as_mut_slice()
            .iter_mut()
            .zip(v.as_mut_slice())
            .zip(p.grad.as_slice())
        {
            *vel = cfg.momentum * *vel + g;
            *theta -= lr * *vel;
            if clip {
                *theta = theta.clamp(-1.0, 1.0);
            }
        }
    }
    Ok(())
}

/// Mean loss and argmax error rate over `ds`, in chunks of 1024 samples.
pub fn evaluate(net: &mut Network, ds: &Dataset, mode: Mode) -> Result<(f64, f64)> {
    let n = ds.len();
    let mut loss_sum = 0.0;
    let mut wrong = 0usize;
    let mut start = 0;
    while start < n {
        let mut end = (start + EVAL_CHUNK).min(n);
        // keep batch statistics defined for the last chunk
        if mode != Mode::Eval && n - end == 1 {
            end = n;
        }
        let idx: Vec<usize> = (start..end).collect();
        let x = ds.x.select_columns(&idx);
        let labels = &ds.y[start..end];
        let logits = net.forward(&x, mode)?;
        let loss = SoftmaxCrossEntropy::new().forward(&logits, labels)?;
        loss_sum += loss * idx.len() as f64;
        wrong += argmax_columns(&logits)
            .iter()
            .zip(labels)
            .filter(|(p, l)| p != l)
            .count();
        start = end;
    }
    Ok((loss_sum / n as f64, wrong as f64 / n as f64))
}

/// Geometry digests of the audited hidden blocks, measured on `x`.
pub fn audit(net: &mut Network, x: &Matrix, all_layers: bool) -> Result<Vec<GeometryDigest>> {
    let blocks = if all_layers {
        net.hidden_blocks()
    } else {
        net.hidden_blocks().min(1)
    };
    let mut out = Vec::with_capacity(blocks);
    let mut input = x.clone();
    for block in 0..blocks {
        let (w, b, kind) = net.block_hyperplanes(block, &input)?;
        let mask = activation_mask(&w, &b, &input, kind)?;
        let report = geometry_report(&mask, &input)?;
        out.push(GeometryDigest {
            layer: block,
            correlation: report.norm_count_correlation,
            mean_jaccard: report.mean_pairwise_jaccard,
            mean_count: report.mean_count(),
            mean_plane_fraction: report.mean_plane_fraction(),
        });
        if block + 1 < blocks {
            input = net.block_output(block, x)?;
        }
    }
    Ok(out)
}

pub struct TrainOutcome {
    pub records: Vec<TrainRecord>,
    pub network: Network,
}

pub fn train_model(
    arch: &ArchSpec,
    train: &Dataset,
    val: &Dataset,
    init: &InitConfig,
    opt: &OptimizerConfig,
    audit_cfg: &AuditConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    train_model_with(arch, train, val, init, opt, audit_cfg, seed, |_| Ok(()))
}

/// Trains and calls `on_record` as soon as each epoch's record exists.
///
/// Epoch 0 describes the initialization and is measured with per-chunk batch
/// statistics (running statistics are not yet meaningful). For later epochs
/// `train_loss` is the sample-weighted mean minibatch loss and the validation
/// error uses running statistics. Shuffling is derived from `seed`.
#[allow(clippy::too_many_arguments)]
pub fn train_model_with(
    arch: &ArchSpec,
    train: &Dataset,
    val: &Dataset,
    init: &InitConfig,
    opt: &OptimizerConfig,
    audit_cfg: &AuditConfig,
    seed: u64,
    mut on_record: impl FnMut(&TrainRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    opt.validate()?;
    if arch.input != train.features() || arch.input != val.features() {
        return Err(Error::config(format!(
            "architecture input {} does not match dataset features {}",
            arch.input,
            train.features()
        )));
    }
    if arch.output < train.n_classes {
        return Err(Error::config(format!(
            "architecture output {} is smaller than class count {}",
            arch.output, train.n_classes
        )));
    }
    let mut net = Network::new(arch, init)?;
    let mut records = Vec::with_capacity(opt.epochs + 1);

    let (loss0, _) = evaluate(&mut net, train, Mode::BatchStats)?;
    let (_, err0) = evaluate(&mut net, val, Mode::BatchStats)?;
    if !loss0.is_finite() {
        return Err(Error::NonFinite { epoch: 0, batch: 0 });
    }
    let first = TrainRecord {
        epoch: 0,
        train_loss: loss0,
        val_error_rate: err0,
        geometry: audit(&mut net, &train.x, audit_cfg.all_layers)?,
    };
    on_record(&first)?;
    records.push(first);

    let mut velocity = Vec::new();
    for epoch in 1..=opt.epochs {
        let lr = opt.lr_schedule.rate(opt.learning_rate, epoch);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (bi, batch) in batches(train, opt.batch_size, seed, epoch as u64)
            .iter()
            .enumerate()
        {
            net.zero_grad();
            let loss = net.loss_and_backward(&batch.x, &batch.labels, Mode::Train)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { epoch, batch: bi });
            }
            sgd_step(&mut net.params_mut(), &mut velocity, lr, opt)?;
            loss_sum += loss * batch.labels.len() as f64;
            seen += batch.labels.len();
        }
        let (_, val_err) = evaluate(&mut net, val, Mode::Eval)?;
        let geometry = if audit_cfg.every > 0 && epoch % audit_cfg.every == 0 {
            audit(&mut net, &train.x, audit_cfg.all_layers)?
        } else {
            Vec::new()
        };
        let record = TrainRecord {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            val_error_rate: val_err,
            geometry,
        };
        on_record(&record)?;
        records.push(record);
    }
    Ok(TrainOutcome {
        records,
        network: net,
    })
}

/// Pre-activations closer than this to a kink invalidate a gradient-check batch.
pub const KINK_MARGIN: f64 = 1e-3;
/// Central-difference step, scaled by `max(1, |θ|)`.
pub const GRADCHECK_STEP: f64 = 1e-5;
/// Floor on the relative-error denominator; below it the error is effectively absolute.
pub const GRADCHECK_FLOOR: f64 = 1e-4;
const MAX_RESAMPLES: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub probes: usize,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub probes: usize,
    /// Batches rejected because a pre-activation sat too close to a kink.
    pub resamples: usize,
    pub worst_param: String,
}

/// `|a - n| / max(|a|, |n|, GRADCHECK_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

/// Compares backprop gradients against central differences of the batch loss
/// for `probes` randomly chosen scalar parameters.
///
/// Networks with binary weights or sign activations are refused: the
/// straight-through estimator is deliberately not the true gradient.
pub fn gradcheck(
    arch: &ArchSpec,
    init: &InitConfig,
    data: &Dataset,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    if arch.uses_ste() {
        return Err(Error::Unsupported(
            "STE is not a true gradient; binary layers and sign activations cannot be checked"
                .into(),
        ));
    }
    if opts.probes == 0 {
        return Err(Error::usage("gradcheck needs at least one probe"));
    }
    let batch_size = opts.batch_size.clamp(2, data.len());
    let mut net = Network::new(arch, init)?;
    let mut rng = Rng::stream(opts.seed, GRADCHECK_STREAM);

    let mut resamples = 0;
    let batch = loop {
        let mut perm: Vec<usize> = (0..data.len()).collect();
        rng.shuffle(&mut perm);
        let batch = data.subset(&perm[..batch_size]);
        net.forward(&batch.x, Mode::BatchStats)?;
        let near_kink = net.activation_inputs().iter().any(|(kind, z)| {
            z.as_slice()
                .iter()
                .any(|v| kind.kinks().iter().any(|k| (v - k).abs() < KINK_MARGIN))
        });
        if !near_kink {
            break batch;
        }
        resamples += 1;
        if resamples >= MAX_RESAMPLES {
            return Err(Error::usage(
                "could not find a batch away from activation kinks",
            ));
        }
    };

    net.zero_grad();
    net.loss_and_backward(&batch.x, &batch.y, Mode::BatchStats)?;
    let (names, grads): (Vec<String>, Vec<Matrix>) = net
        .params_mut()
        .into_iter()
        .map(|p| (p.name, p.grad.clone()))
        .unzip();
    let sizes: Vec<usize> = grads.iter().map(|g| g.as_slice().len()).collect();
    let total: usize = sizes.iter().sum();

    let mut max_err: f64 = 0.0;
    let mut worst = String::new();
    for _ in 0..opts.probes {
        let mut flat = rng.below(total);
        let mut p = 0;
        while flat >= sizes[p] {
            flat -= sizes[p];
            p += 1;
        }
        let original = net.params_mut()[p].value.as_slice()[flat];
        let h = GRADCHECK_STEP * original.abs().max(1.0);
        let mut loss_at = |value: f64| -> Result<f64> {
            net.params_mut()[p].value.as_mut_slice()[flat] = value;
            net.loss(&batch.x, &batch.y, Mode::BatchStats)
        };
        let plus = loss_at(original + h)?;
        let minus = loss_at(original - h)?;
        loss_at(original)?;
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads[p].as_slice()[flat];
        let err = relative_error(analytic, numeric);
        if err > max_err {
            max_err = err;
            worst = format!("{}[{flat}]", names[p]);
        }
    }
    Ok(GradcheckReport {
        max_rel_err: max_err,
        probes: opts.probes,
        resamples,
        worst_param: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::ActivationKind;
    use crate::data::make_blobs;

    fn param(value: &mut Matrix, grad: &Matrix, binary: bool) -> Vec<Matrix> {
        let cfg = OptimizerConfig {
            momentum: 0.0,
            ..OptimizerConfig::default()
        };
        let mut params = vec![Param {
            name: "p".into(),
            value,
            grad,
            binary_latent: binary,
        }];
        let mut vel = Vec::new();
        sgd_step(&mut params, &mut vel, 1.0, &cfg).unwrap();
        vel
    }

    #[test]
    fn sgd_zero_gradient_is_noop() {
        let mut v = Matrix::from_rows(&[&[0.5, -2.0]]);
        let before = v.clone();
        param(&mut v, &Matrix::zeros(1, 2), false);
        assert_eq!(v, before);
    }

    #[test]
    fn sgd_plain_step_subtracts_gradient() {
        let mut v = Matrix::from_rows(&[&[0.5, -2.0]]);
        let g = Matrix::from_rows(&[&[0.25, -1.0]]);
        param(&mut v, &g, false);
        assert_eq!(v, Matrix::from_rows(&[&[0.25, -1.0]]));
    }

    #[test]
    fn sgd_clips_binary_latent_weights() {
        let mut v = Matrix::from_rows(&[&[0.8, -0.9]]);
        let g = Matrix::from_rows(&[&[-0.5, 0.05]]);
        param(&mut v, &g, true);
        assert_eq!(v.get(0, 0), 1.0);
        assert!((v.get(0, 1) - -0.95).abs() < 1e-15);
        let mut free = Matrix::from_rows(&[&[0.8]]);
        param(&mut free, &Matrix::from_rows(&[&[-0.5]]), false);
        assert!((free.get(0, 0) - 1.3).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let cfg = OptimizerConfig {
            momentum: 0.5,
            ..OptimizerConfig::default()
        };
        let mut value = Matrix::column_vector(&[0.0]);
        let grad = Matrix::column_vector(&[1.0]);
        let mut vel = Vec::new();
        for _ in 0..2 {
            let mut params = vec![Param {
                name: "p".into(),
                value: &mut value,
                grad: &grad,
                binary_latent: false,
            }];
            sgd_step(&mut params, &mut vel, 0.1, &cfg).unwrap();
        }
        assert!((value.get(0, 0) - -(0.1 + 0.15)).abs() < 1e-15);
    }

    #[test]
    fn sgd_shape_mismatch() {
        let mut v = Matrix::zeros(2, 2);
        let g = Matrix::zeros(2, 1);
        let mut params = vec![Param {
            name: "p".into(),
            value: &mut v,
            grad: &g,
            binary_latent: false,
        }];
        let mut vel = Vec::new();
        let err = sgd_step(&mut params, &mut vel, 0.1, &OptimizerConfig::default());
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn step_decay_schedule() {
        let s = LrSchedule::StepDecay {
            factor: 0.5,
            every: 2,
        };
        assert_eq!(s.rate(1.0, 1), 1.0);
        assert_eq!(s.rate(1.0, 2), 1.0);
        assert_eq!(s.rate(1.0, 3), 0.5);
        assert_eq!(s.rate(1.0, 5), 0.25);
        assert_eq!(LrSchedule::Constant.rate(0.3, 9), 0.3);
    }

    fn blobs() -> (Dataset, Dataset) {
        make_blobs(2, 2, 200, 0.5, 1)
            .unwrap()
            .split(0.25, 1)
            .unwrap()
    }

    #[test]
    fn zero_epochs_gives_initial_record_only() {
        let (train, val) = blobs();
        let arch = ArchSpec::mlp(2, &[8], 2, ActivationKind::ReLU, false, false);
        let opt = OptimizerConfig {
            epochs: 0,
            ..OptimizerConfig::default()
        };
        let out = train_model(
            &arch,
            &train,
            &val,
            &InitConfig::default(),
            &opt,
            &AuditConfig::default(),
            1,
        )
        .unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].epoch, 0);
        assert_eq!(out.records[0].geometry.len(), 1);
    }

    #[test]
    fn separable_blobs_are_learned() {
        let (train, val) = blobs();
        let arch = ArchSpec::mlp(2, &[16], 2, ActivationKind::ReLU, false, false);
        let opt = OptimizerConfig {
            epochs: 20,
            learning_rate: 0.05,
            ..OptimizerConfig::default()
        };
        for seed in [1, 2, 3] {
            let init = InitConfig {
                seed,
                ..InitConfig::default()
            };
            let out = train_model(
                &arch,
                &train,
                &val,
                &init,
                &opt,
                &AuditConfig::default(),
                seed,
            )
            .unwrap();
            let last = out.records.last().unwrap();
            assert!(last.val_error_rate < 0.05, "seed {seed}: {last:?}");
            assert!(last.train_loss < out.records[0].train_loss);
        }
    }

    #[test]
    fn training_is_bit_reproducible() {
        let (train, val) = blobs();
        let arch = ArchSpec::mlp(2, &[8, 8], 2, ActivationKind::HTanh, false, true);
        let opt = OptimizerConfig {
            epochs: 3,
            batch_size: 16,
            ..OptimizerConfig::default()
        };
        let init = InitConfig {
            bias_lambda: 1.0,
            ..InitConfig::default()
        };
        let audit = AuditConfig {
            every: 1,
            all_layers: true,
        };
        let a = train_model(&arch, &train, &val, &init, &opt, &audit, 4)
            .unwrap()
            .records;
        let b = train_model(&arch, &train, &val, &init, &opt, &audit, 4)
            .unwrap()
            .records;
        assert_eq!(a, b);
        assert_eq!(a[2].geometry.len(), 2);
    }

    #[test]
    fn divergence_is_reported() {
        let (train, val) = blobs();
        let arch = ArchSpec::mlp(2, &[8], 2, ActivationKind::ReLU, false, false);
        let opt = OptimizerConfig {
            epochs: 5,
            learning_rate: 1e200,
            momentum: 0.0,
            ..OptimizerConfig::default()
        };
        let err = train_model(
            &arch,
            &train,
            &val,
            &InitConfig::default(),
            &opt,
            &AuditConfig::default(),
            1,
        );
        assert!(
            matches!(err, Err(Error::NonFinite { .. })),
            "{:?}",
            err.err()
        );
    }

    #[test]
    fn shape_disagreement_is_a_config_error() {
        let (train, val) = blobs();
        let arch = ArchSpec::mlp(3, &[8], 2, ActivationKind::ReLU, false, false);
        let err = train_model(
            &arch,
            &train,
            &val,
            &InitConfig::default(),
            &OptimizerConfig::default(),
            &AuditConfig::default(),
            1,
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn gradcheck_small_networks() {
        let data = make_blobs(3, 4, 30, 1.0, 2).unwrap();
        let opts = GradcheckOptions {
            probes: 100,
            batch_size: 8,
            seed: 3,
        };
        for (act, bn) in [
            (ActivationKind::ReLU, false),
            (ActivationKind::HTanh, true),
            (ActivationKind::HTanh, false),
        ] {
            let arch = ArchSpec::mlp(4, &[6], 3, act, false, bn);
            let init = InitConfig {
                bias_lambda: 0.5,
                ..InitConfig::default()
            };
            let r = gradcheck(&arch, &init, &data, &opts).unwrap();
            assert!(r.max_rel_err < 1e-5, "{act} bn={bn}: {r:?}");
        }
    }

    #[test]
    fn gradcheck_without_hidden_layers() {
        let data = make_blobs(3, 4, 30, 1.0, 2).unwrap();
        let arch = ArchSpec::mlp(4, &[], 3, ActivationKind::ReLU, false, false);
        let opts = GradcheckOptions {
            probes: 50,
            batch_size: 8,
            seed: 1,
        };
        let r = gradcheck(&arch, &InitConfig::default(), &data, &opts).unwrap();
        assert!(r.max_rel_err < 1e-7, "{r:?}");
        assert_eq!(r.resamples, 0);
    }

    #[test]
    fn gradcheck_refuses_ste() {
        let data = make_blobs(2, 2, 10, 1.0, 2).unwrap();
        let opts = GradcheckOptions {
            probes: 1,
            batch_size: 4,
            seed: 1,
        };
        for (act, binary) in [
            (ActivationKind::SignSTE, false),
            (ActivationKind::HTanh, true),
        ] {
            let arch = ArchSpec::mlp(2, &[4], 2, act, binary, true);
            let err = gradcheck(&arch, &InitConfig::default(), &data, &opts);
            assert!(matches!(err, Err(Error::Unsupported(_))));
        }
    }
}
