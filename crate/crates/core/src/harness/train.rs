//! Leave-one-domain training and evaluation of the two variants.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::classifier::{cross_entropy, SmallCnn};
use super::dataset::DomainDataset;
use super::mix_seed;
use crate::error::{Error, Result};
use crate::invnorm::{InvNormConfig, InvNormModel};
use crate::numerics::{Graph, Param, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    InvNorm,
}

impl Variant {
    pub const ALL: [Variant; 2] = [Variant::Baseline, Variant::InvNorm];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::InvNorm => "invnorm",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "invnorm" => Ok(Variant::InvNorm),
            _ => Err(Error::Config(format!(
                "unknown variant {s:?}; expected baseline or invnorm"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub epochs: usize,
    /// Initial learning rate; the cosine schedule decays it to `lr_min`.
    pub lr: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Flow steps per InvNorm block.
    pub steps_per_block: usize,
    /// Coupling network width.
    pub hidden: usize,
    /// Gradients are rescaled so their global L2 norm is at most this.
    pub grad_clip: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.01,
            lr_min: 0.0,
            momentum: 0.9,
            batch_size: 64,
            steps_per_block: 5,
            hidden: 32,
            grad_clip: 2.0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.lr_min.is_finite() && (0.0..=self.lr).contains(&self.lr_min)) {
            return bad(format!("lr_min must be in [0, lr], got {}", self.lr_min));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("grad_clip must be > 0, got {}", self.grad_clip));
        }
        self.invnorm_config(3).validate()
    }

    pub fn invnorm_config(&self, channels: usize) -> InvNormConfig {
        InvNormConfig::new(channels)
            .with_steps(self.steps_per_block)
            .with_hidden(self.hidden)
    }

    /// Cosine schedule over `total` optimizer steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let t = step as f64 / total.max(1) as f64;
        self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub variant: Variant,
    pub invnorm: Option<InvNormModel<f32>>,
    pub classifier: SmallCnn<f32>,
    /// Mean loss over the last epoch.
    pub final_loss: f64,
}

const EVAL_BATCH: usize = 200;

impl TrainedModel {
    /// The image-space transform in front of the classifier.
    pub fn transform(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        match &self.invnorm {
            Some(m) => Ok(m.forward(x)?.output),
            None => Ok(x.clone()),
        }
    }

    pub fn predict(&self, x: &Tensor<f32>) -> Result<Vec<usize>> {
        let logits = self.classifier.logits(&self.transform(x)?)?;
        let k = logits.shape().c;
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| {
                // first maximum wins, so ties are deterministic
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }

    pub fn predict_ids(&self, data: &DomainDataset, ids: &[usize]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(ids.len());
        for chunk in ids.chunks(EVAL_BATCH) {
            out.extend(self.predict(&data.images_of(chunk)?)?);
        }
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        self.classifier.param_count() + self.invnorm.as_ref().map_or(0, |m| m.param_count())
    }
}

/// SGD with heavy-ball momentum: `v = m v + g; p -= lr v`.
struct Sgd {
    momentum: f32,
    clip: f64,
    velocity: Vec<Option<Tensor<f32>>>,
}

impl Sgd {
    fn step(&mut self, params: Vec<&mut Param<f32>>, grads: Vec<Option<Tensor<f32>>>, lr: f32) {
        if self.velocity.is_empty() {
            self.velocity = vec![None; params.len()];
        }
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        let scale = if norm > self.clip {
            (self.clip / norm) as f32
        } else {
            1.0
        };
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            let Some(g) = g else { continue };
            let v = v.get_or_insert_with(|| Tensor::zeros(g.shape()));
            for ((vi, gi), pi) in v
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(p.value_mut().data_mut())
            {
                *vi = self.momentum * *vi + scale * gi;
                *pi -= lr * *vi;
            }
        }
    }
}

fn training_error(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        e @ Error::Training { .. } => e,
        e => Error::Training {
            epoch,
            reason: e.to_string(),
        },
    }
}

/// Train one variant on `train_ids`. Classifier initialization and batch
/// order depend only on `seed`, so both variants see identical classifiers
/// and batches.
pub fn train_variant(
    variant: Variant,
    data: &DomainDataset,
    train_ids: &[usize],
    hp: &HyperParams,
    seed: u64,
) -> Result<TrainedModel> {
    hp.validate()?;
    if train_ids.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let channels = data.images.shape().c;
    let mut classifier = SmallCnn::new(
        channels,
        data.class_count,
        &mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 1)),
    )?;
    let mut invnorm = match variant {
        Variant::Baseline => None,
        Variant::InvNorm => Some(InvNormModel::new(
            hp.invnorm_config(channels),
            &mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 2)),
        )?),
    };
    let mut order_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 3));
    let mut order = train_ids.to_vec();
    let batches_per_epoch = train_ids.len().div_ceil(hp.batch_size);
    let total = hp.epochs * batches_per_epoch;
    let mut sgd = Sgd {
        momentum: hp.momentum as f32,
        clip: hp.grad_clip,
        velocity: Vec::new(),
    };
    let mut final_loss = f64::NAN;

    for epoch in 0..hp.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for (b, ids) in order.chunks(hp.batch_size).enumerate() {
            let x = data.images_of(ids)?;
            let labels = data.labels_of(ids);
            if let Some(m) = invnorm.as_mut() {
                if !m.is_initialized() {
                    m.initialize(&x).map_err(training_error(epoch))?;
                }
            }
            let mut g = Graph::new();
            let xv = g.constant(x);
            let h = match &invnorm {
                Some(m) => {
                    m.forward_graph(&mut g, xv)
                        .map_err(training_error(epoch))?
                        .0
                }
                None => xv,
            };
            let logits = classifier.forward_graph(&mut g, h)?;
            let loss = cross_entropy(&mut g, logits, &labels)?;
            let lv = g.value(loss).data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: format!("loss is {lv} at batch {b}"),
                });
            }
            epoch_loss += lv * ids.len() as f64;
            g.backward(loss)?;
            let lr = hp.lr_at(epoch * batches_per_epoch + b, total) as f32;
            let mut params: Vec<&mut Param<f32>> = match invnorm.as_mut() {
                Some(m) => m.params_mut(),
                None => Vec::new(),
            };
            params.extend(classifier.params_mut());
            let grads = params.iter().map(|p| g.param_grad(p).cloned()).collect();
            sgd.step(params, grads, lr);
        }
        final_loss = epoch_loss / train_ids.len() as f64;
        if let Some(m) = &invnorm {
            for step in m.steps() {
                step.actnorm.check().map_err(training_error(epoch))?;
                step.invconv.check().map_err(training_error(epoch))?;
            }
        }
    }
    Ok(TrainedModel {
        variant,
        invnorm,
        classifier,
        final_loss,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub held_out_domain: String,
    pub seed: u64,
    /// Accuracy on every domain; only the held-out entry is a test score.
    pub per_domain_accuracy: BTreeMap<String, f64>,
    pub held_out_accuracy: f64,
    /// Unweighted mean of per-class F1 on the held-out domain.
    pub macro_f1: f64,
    /// Mean pairwise distance between per-domain centroids of per-channel
    /// (mean, std) of the transform output, after dataset-wide per-channel
    /// standardization of that output.
    pub feature_style_gap: f64,
    pub params_total: usize,
}

/// Unweighted mean of per-class F1; classes absent from both `truth` and
/// `pred` score 0.
pub fn macro_f1(truth: &[usize], pred: &[usize], class_count: usize) -> f64 {
    let mut tp = vec![0usize; class_count];
    let mut fp = vec![0usize; class_count];
    let mut fneg = vec![0usize; class_count];
    for (&t, &p) in truth.iter().zip(pred) {
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fneg[t] += 1;
        }
    }
    let sum: f64 = (0..class_count)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fneg[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    sum / class_count as f64
}

/// Mean pairwise L2 distance between per-domain centroids of
/// `[mu_0.., sigma_0..]` style vectors, one per sample.
pub fn style_gap(styles: &[Vec<f64>], domain_of: &[usize], domains: usize) -> f64 {
    let dim = styles.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; domains];
    let mut counts = vec![0usize; domains];
    for (s, &d) in styles.iter().zip(domain_of) {
        counts[d] += 1;
        for (a, v) in sums[d].iter_mut().zip(s) {
            *a += v;
        }
    }
    let centroids: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .filter(|(_, &n)| n > 0)
        .map(|(s, &n)| s.into_iter().map(|v| v / n as f64).collect())
        .collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            let d2: f64 = centroids[i]
                .iter()
                .zip(&centroids[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            total += d2.sqrt();
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

fn sample_styles(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    let s = t.shape();
    (0..s.b)
        .map(|b| {
            let (mut mu, mut sigma) = (Vec::new(), Vec::new());
            for c in 0..s.c {
                let p = t.plane(b, c);
                let n = p.len() as f64;
                let m = p.iter().map(|&v| v as f64).sum::<f64>() / n;
                let var = p.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n;
                mu.push(m);
                sigma.push(var.sqrt());
            }
            mu.extend(sigma);
            mu
        })
        .collect()
}

/// Rescale `[mu.., sigma..]` style vectors as if every channel of the
/// underlying images had been standardized by its dataset-wide mean and std.
/// A global per-channel affine map is absorbed by the first classifier conv,
/// so only the residual per-domain variation is left in the vectors.
fn standardize_styles(styles: &mut [Vec<f64>]) {
    let Some(first) = styles.first() else { return };
    let c = first.len() / 2;
    let n = styles.len() as f64;
    for ch in 0..c {
        let mean = styles.iter().map(|s| s[ch]).sum::<f64>() / n;
        // equal plane sizes: E[v^2] is the mean of mu^2 + sigma^2
        let second = styles
            .iter()
            .map(|s| s[ch] * s[ch] + s[c + ch] * s[c + ch])
            .sum::<f64>()
            / n;
        let std = (second - mean * mean).max(0.0).sqrt();
        let scale = if std > 1e-12 { 1.0 / std } else { 1.0 };
        for s in styles.iter_mut() {
            s[ch] = (s[ch] - mean) * scale;
            s[c + ch] *= scale;
        }
    }
}

/// Style gap of `transform`'s output (raw images when `None`) over all
/// samples of `data`, measured after dataset-wide per-channel
/// standardization of that output.
pub fn feature_style_gap(
    transform: Option<&InvNormModel<f32>>,
    data: &DomainDataset,
) -> Result<f64> {
    let mut styles = Vec::with_capacity(data.len());
    let ids: Vec<usize> = (0..data.len()).collect();
    for chunk in ids.chunks(EVAL_BATCH) {
        let x = data.images_of(chunk)?;
        let y = match transform {
            Some(m) => m.forward(&x)?.output,
            None => x,
        };
        styles.extend(sample_styles(&y));
    }
    standardize_styles(&mut styles);
    Ok(style_gap(&styles, &data.domain_of, data.domain_names.len()))
}

/// Accuracy per domain, macro-F1 on `held_out`, style gap and size.
pub fn evaluate(
    model: &TrainedModel,
    data: &DomainDataset,
    held_out: &str,
    seed: u64,
) -> Result<EvalReport> {
    let held = data.domain_index(held_out)?;
    if model.classifier.class_count() != data.class_count {
        return Err(Error::Config(format!(
            "model has {} classes, dataset {}",
            model.classifier.class_count(),
            data.class_count
        )));
    }
    let mut per_domain_accuracy = BTreeMap::new();
    let mut f1 = 0.0;
    for (d, name) in data.domain_names.iter().enumerate() {
        let ids = data.indices_of(d);
        let pred = model.predict_ids(data, &ids)?;
        let truth = data.labels_of(&ids);
        let correct = pred.iter().zip(&truth).filter(|(p, t)| p == t).count();
        per_domain_accuracy.insert(name.clone(), correct as f64 / ids.len().max(1) as f64);
        if d == held {
            f1 = macro_f1(&truth, &pred, data.class_count);
        }
    }
    Ok(EvalReport {
        variant: model.variant,
        held_out_domain: held_out.to_string(),
        seed,
        held_out_accuracy: per_domain_accuracy[held_out],
        per_domain_accuracy,
        macro_f1: f1,
        feature_style_gap: feature_style_gap(model.invnorm.as_ref(), data)?,
        params_total: model.param_count(),
    })
}

/// Both variants for one held-out domain and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub held_out_domain: String,
    pub seed: u64,
    pub baseline: EvalReport,
    pub invnorm: EvalReport,
}

/// Train and evaluate the baseline and the InvNorm variant with
/// `held_out` excluded from training.
pub fn train(
    data: &DomainDataset,
    held_out: &str,
    hp: &HyperParams,
    seed: u64,
) -> Result<(Vec<TrainedModel>, RunSummary)> {
    let (train_ids, _) = data.leave_one_out(held_out)?;
    let mut models = Vec::new();
    let mut reports = Vec::new();
    for v in Variant::ALL {
        let m = train_variant(v, data, &train_ids, hp, seed)?;
        reports.push(evaluate(&m, data, held_out, seed)?);
        models.push(m);
    }
    let invnorm = reports.pop().expect("two variants");
    let baseline = reports.pop().expect("two variants");
    Ok((
        models,
        RunSummary {
            held_out_domain: held_out.to_string(),
            seed,
            baseline,
            invnorm,
        },
    ))
}

/// Every `(held_out, seed)` pair, in row-major order. Pairs run on the
/// ambient rayon pool; results do not depend on its size.
pub fn run_leave_one_domain(
    data: &DomainDataset,
    held_out: &[String],
    seeds: &[u64],
    hp: &HyperParams,
) -> Result<Vec<RunSummary>> {
    let jobs: Vec<(&String, u64)> = held_out
        .iter()
        .flat_map(|h| seeds.iter().map(move |&s| (h, s)))
        .collect();
    jobs.par_iter()
        .map(|(h, s)| train(data, h, hp, *s).map(|(_, r)| r))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{default_domains, generate_dataset};

    #[test]
    fn macro_f1_hand_cases() {
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2], 3), 1.0);
        // class 0: tp1 fp1 fn0 -> 2/3; class 1: tp0 fp0 fn1 -> 0
        let f = macro_f1(&[0, 1], &[0, 0], 2);
        assert!((f - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn style_gap_hand_cases() {
        let s = vec![
            vec![0.0, 0.0],
            vec![2.0, 0.0],
            vec![3.0, 4.0],
            vec![3.0, 4.0],
        ];
        // centroids (1, 0) and (3, 4)
        assert!((style_gap(&s, &[0, 0, 1, 1], 2) - 20f64.sqrt()).abs() < 1e-12);
        assert_eq!(style_gap(&s[2..], &[0, 1], 2), 0.0);
    }

    #[test]
    fn standardized_styles_match_pixel_standardization() {
        let data = generate_dataset(4, &default_domains(), 6, 2, 16).unwrap();
        let x = &data.images;
        let s = x.shape();
        // oracle: standardize every pixel first, then take plane stats
        let mut pixels = x.clone();
        for c in 0..s.c {
            let vals: Vec<f64> = (0..s.b)
                .flat_map(|b| x.plane(b, c).iter().map(|&v| v as f64))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let std =
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            for b in 0..s.b {
                pixels
                    .plane_mut(b, c)
                    .iter_mut()
                    .for_each(|v| *v = ((*v as f64 - mean) / std) as f32);
            }
        }
        let want = style_gap(&sample_styles(&pixels), &data.domain_of, 4);
        let got = feature_style_gap(None, &data).unwrap();
        assert!(want > 0.0);
        assert!((got - want).abs() < 1e-4 * want, "{got} vs {want}");
    }

    #[test]
    fn style_gap_ignores_global_channel_affine() {
        let mut data = generate_dataset(5, &default_domains(), 6, 2, 16).unwrap();
        let before = feature_style_gap(None, &data).unwrap();
        let s = data.images.shape();
        for b in 0..s.b {
            for (c, (a, k)) in [(3.0f32, 1.0f32), (0.2, -4.0), (-7.0, 0.5)]
                .into_iter()
                .enumerate()
            {
                data.images
                    .plane_mut(b, c)
                    .iter_mut()
                    .for_each(|v| *v = a * *v + k);
            }
        }
        let after = feature_style_gap(None, &data).unwrap();
        assert!(
            (after - before).abs() < 1e-4 * before,
            "{after} vs {before}"
        );
    }

    #[test]
    fn identical_domains_have_zero_gap() {
        let mut spec = default_domains()[0].clone();
        spec.noise_std = 0.0;
        let mut twin = spec.clone();
        twin.name = "twin".into();
        let data = generate_dataset(6, &[spec, twin], 6, 2, 16).unwrap();
        assert!(feature_style_gap(None, &data).unwrap() < 1e-9);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let hp = HyperParams::default();
        assert_eq!(hp.lr_at(0, 100), 0.01);
        assert!((hp.lr_at(50, 100) - 0.005).abs() < 1e-12);
        assert!(hp.lr_at(100, 100).abs() < 1e-12);
    }

    #[test]
    fn hyperparam_validation() {
        assert!(HyperParams::default().validate().is_ok());
        for bad in [
            HyperParams {
                epochs: 0,
                ..Default::default()
            },
            HyperParams {
                lr: 0.0,
                ..Default::default()
            },
            HyperParams {
                lr: f64::NAN,
                ..Default::default()
            },
            HyperParams {
                momentum: 1.0,
                ..Default::default()
            },
            HyperParams {
                batch_size: 0,
                ..Default::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn divergence_reports_epoch() {
        let data = generate_dataset(0, &default_domains()[..2], 10, 2, 16).unwrap();
        let hp = HyperParams {
            epochs: 3,
            lr: 1e30,
            batch_size: 10,
            ..Default::default()
        };
        let ids: Vec<usize> = (0..data.len()).collect();
        match train_variant(Variant::Baseline, &data, &ids, &hp, 0) {
            Err(Error::Training { epoch, .. }) => assert!(epoch < 3),
            other => panic!("expected training error, got {other:?}"),
        }
    }

    #[test]
    fn variant_names() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("resnet".parse::<Variant>().is_err());
    }
}
