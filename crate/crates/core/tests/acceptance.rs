//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! The process exits non-zero when a correctness criterion fails. Wall-clock
//! budgets depend on the host, so they are printed next to the result but do
//! not change the exit status. Set `ACCEPTANCE_SKIP_EXPERIMENT=1` to skip the
//! leave-one-domain experiment, which takes close to an hour on one core.

use std::time::{Duration, Instant};

use invnorm::harness::{
    default_domains, generate_dataset, run_leave_one_domain, train, EvalReport, HyperParams,
    RunSummary, SmallCnn,
};
use invnorm::invnorm::InstanceNormLayer;
use invnorm::verify::{self, GradLayer, GRAD_REL_TOL, ROUNDTRIP_TOL};
use invnorm::{Error, InvNormConfig, InvNormModel, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }

    fn error(e: Error) -> Self {
        Self::new(false, format!("error: {e}"))
    }
}

struct Suite {
    failures: usize,
}

impl Suite {
    fn check(
        &mut self,
        id: &str,
        name: &str,
        budget: Option<Duration>,
        f: impl FnOnce() -> Outcome,
    ) {
        let start = Instant::now();
        let out = f();
        let took = start.elapsed();
        let mut line = format!(
            "[{}] {id} {name}: {} ({:.1}s",
            if out.passed { "PASS" } else { "FAIL" },
            out.detail,
            took.as_secs_f64()
        );
        if let Some(b) = budget {
            let within = took <= b;
            line += &format!(
                ", budget {}s {}",
                b.as_secs(),
                if within { "met" } else { "EXCEEDED" }
            );
        }
        line.push(')');
        println!("{line}");
        if !out.passed {
            self.failures += 1;
        }
    }
}

fn roundtrip() -> Outcome {
    let shapes = verify::default_roundtrip_shapes();
    match verify::roundtrip_suite(&shapes, 20, 0, 32) {
        Err(e) => Outcome::error(e),
        Ok(rows) => {
            let worst = rows.iter().map(|r| r.max_err).fold(0.0, f64::max);
            let exact = rows.iter().all(|r| r.squeeze_exact);
            Outcome::new(
                worst < ROUNDTRIP_TOL && exact,
                format!(
                    "{} shapes x 20 seeds, worst error {worst:.2e}, squeeze bit-exact {exact}",
                    rows.len()
                ),
            )
        }
    }
}

fn logdet() -> Outcome {
    match verify::logdet_suite(16, 0) {
        Err(e) => Outcome::error(e),
        Ok(rows) => {
            let worst = rows.iter().map(|r| r.report.abs_err).fold(0.0, f64::max);
            let coupling_zero = rows
                .iter()
                .filter(|r| r.name == "coupling")
                .all(|r| r.report.layer_logdet == 0.0);
            let ok = rows.iter().all(|r| r.passed()) && coupling_zero;
            Outcome::new(
                ok,
                format!(
                    "{} layers, worst |error| {worst:.2e}, coupling exactly 0: {coupling_zero}",
                    rows.len()
                ),
            )
        }
    }
}

fn gradients() -> Outcome {
    match verify::gradcheck_suite(&GradLayer::ALL, 1e-3, 0) {
        Err(e) => Outcome::error(e),
        Ok(rows) => {
            let worst = rows.iter().map(|r| r.worst()).fold(0.0, f64::max);
            let failed: Vec<String> = rows
                .iter()
                .filter(|r| !r.passed(GRAD_REL_TOL))
                .map(|r| r.layer.to_string())
                .collect();
            Outcome::new(
                failed.is_empty(),
                format!(
                    "{} layers, worst relative error {worst:.2e}, failing {failed:?}",
                    rows.len()
                ),
            )
        }
    }
}

fn instance_norm_contract() -> Result<Outcome, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_mean = 0.0f64;
    let mut worst_std = 0.0f64;
    for trial in 0..10 {
        let c = 1 + trial % 4;
        let shape = Shape::new(2, c, 6 + trial, 5 + trial);
        let gamma = Tensor::<f64>::uniform(Shape::new(1, c, 1, 1), 0.5, 2.0, &mut rng);
        let beta = Tensor::<f64>::uniform(Shape::new(1, c, 1, 1), -1.0, 1.0, &mut rng);
        let layer = InstanceNormLayer::from_parts(gamma.clone(), beta.clone(), 1e-5)?;
        let mut x = Tensor::<f64>::normal(shape, 1.0, &mut rng);
        for b in 0..shape.b {
            for ch in 0..c {
                let (scale, shift) = (rng.gen_range(0.2..5.0), rng.gen_range(-10.0..10.0));
                x.plane_mut(b, ch)
                    .iter_mut()
                    .for_each(|v| *v = *v * scale + shift);
            }
        }
        let (y, _) = layer.normalize(&x)?;
        for b in 0..shape.b {
            for ch in 0..c {
                let p = y.plane(b, ch);
                let n = p.len() as f64;
                let mean = p.iter().sum::<f64>() / n;
                let std = (p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                worst_mean = worst_mean.max((mean - beta.data()[ch]).abs());
                worst_std = worst_std.max((std - gamma.data()[ch]).abs());
            }
        }
    }
    // constant channels: output must be finite and equal to beta
    let beta = [0.25, -1.5, 3.0];
    let layer = InstanceNormLayer::from_parts(
        Tensor::<f64>::vector(&[1.5, 0.7, 2.0]),
        Tensor::vector(&beta),
        1e-5,
    )?;
    let x = Tensor::<f64>::from_fn(Shape::new(2, 3, 4, 4), |b, c, _, _| {
        (b * 3 + c) as f64 * 7.0 - 4.0
    });
    let (y, _) = layer.normalize(&x)?;
    let constant_ok = (0..2).all(|b| {
        (0..3).all(|c| {
            y.plane(b, c)
                .iter()
                .all(|v| v.is_finite() && (v - beta[c]).abs() < 1e-12)
        })
    });
    Ok(Outcome::new(
        worst_mean < 1e-3 && worst_std < 1e-2 && constant_ok,
        format!(
            "worst |mean - beta| {worst_mean:.1e}, worst |std - gamma| {worst_std:.1e}, constant channels -> beta: {constant_ok}"
        ),
    ))
}

fn style_collapse() -> Result<Outcome, Error> {
    let mut worst_ratio = 0.0f64;
    for (i, &(b, c, h, w)) in [(1, 3, 16, 16), (2, 3, 32, 32), (1, 1, 8, 12), (2, 4, 12, 8)]
        .iter()
        .enumerate()
    {
        let shape = Shape::new(b, c, h, w);
        let mut rng = ChaCha8Rng::seed_from_u64(10 + i as u64);
        let model = InvNormModel::<f64>::identity(InvNormConfig::new(c), &mut rng)?;
        let x = Tensor::<f64>::uniform(shape, 0.0, 1.0, &mut rng);
        let mut x2 = x.clone();
        for s in 0..b {
            for ch in 0..c {
                let (gain, bias) = (rng.gen_range(0.3..2.5), rng.gen_range(-0.5..0.5));
                x2.plane_mut(s, ch)
                    .iter_mut()
                    .for_each(|v| *v = gain * *v + bias);
            }
        }
        let y1 = model.forward(&x)?.output;
        let y2 = model.forward(&x2)?.output;
        let l2 = |a: &Tensor<f64>, b: &Tensor<f64>| {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(p, q)| (p - q).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        worst_ratio = worst_ratio.max(l2(&y1, &y2) / l2(&x, &x2));
    }
    Ok(Outcome::new(
        worst_ratio <= 0.1,
        format!("worst output/input L2 ratio {worst_ratio:.2e} over 4 shapes"),
    ))
}

fn experiment() -> Result<Outcome, Error> {
    let data = generate_dataset(0, &default_domains(), 500, 5, 32)?;
    let held: Vec<String> = data.domain_names.clone();
    let seeds = [0, 1, 2];
    let runs = run_leave_one_domain(&data, &held, &seeds, &HyperParams::default())?;
    let mean = |f: &dyn Fn(&RunSummary) -> f64, rs: &[&RunSummary]| {
        rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64
    };
    let all: Vec<&RunSummary> = runs.iter().collect();
    let base = mean(&|r| r.baseline.held_out_accuracy, &all);
    let inv = mean(&|r| r.invnorm.held_out_accuracy, &all);
    let mut gap_ok = true;
    let mut rows = Vec::new();
    for h in &held {
        let rs: Vec<&RunSummary> = runs.iter().filter(|r| &r.held_out_domain == h).collect();
        let raw_gap = mean(&|r| r.baseline.feature_style_gap, &rs);
        let inv_gap = mean(&|r| r.invnorm.feature_style_gap, &rs);
        // every seed, not only the mean
        gap_ok &= rs
            .iter()
            .all(|r| r.invnorm.feature_style_gap < r.baseline.feature_style_gap);
        rows.push(format!(
            "{h}: acc {:.3} vs {:.3}, gap {inv_gap:.3} vs {raw_gap:.3}",
            mean(&|r| r.invnorm.held_out_accuracy, &rs),
            mean(&|r| r.baseline.held_out_accuracy, &rs),
        ));
    }
    Ok(Outcome::new(
        inv > base && gap_ok,
        format!(
            "mean held-out acc invnorm {inv:.3} vs baseline {base:.3}; style gap lower on every rotation: {gap_ok}; [{}]",
            rows.join("; ")
        ),
    ))
}

fn serialization() -> Result<Outcome, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::<f32>::uniform(Shape::new(2, 3, 16, 16), 0.0, 1.0, &mut rng);
    let model = verify::random_model(InvNormConfig::new(3).with_steps(2), &x, 7)?;
    let bytes = model.to_bytes();
    let back = InvNormModel::from_bytes(&bytes)?;
    let same = back.forward(&x)?.output == model.forward(&x)?.output && back.to_bytes() == bytes;
    let mut bad = bytes.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 0x10;
    let rejected = matches!(InvNormModel::from_bytes(&bad), Err(Error::Format(_)));

    let cnn = SmallCnn::<f32>::new(3, 5, &mut rng)?;
    let cnn_bytes = cnn.to_bytes();
    let cnn_same = SmallCnn::from_bytes(&cnn_bytes)?.logits(&x)? == cnn.logits(&x)?;
    let mut cnn_bad = cnn_bytes.clone();
    let last = cnn_bad.len() - 1;
    cnn_bad[last] ^= 1;
    let cnn_rejected = matches!(SmallCnn::from_bytes(&cnn_bad), Err(Error::Format(_)));
    Ok(Outcome::new(
        same && rejected && cnn_same && cnn_rejected,
        format!(
            "flow bit-identical {same}, corrupt flow rejected {rejected}, classifier bit-identical {cnn_same}, corrupt classifier rejected {cnn_rejected}"
        ),
    ))
}

fn determinism() -> Result<Outcome, Error> {
    let hp = HyperParams {
        epochs: 2,
        batch_size: 32,
        ..HyperParams::default()
    };
    let run = || -> Result<Vec<String>, Error> {
        let data = generate_dataset(3, &default_domains(), 40, 4, 16)?;
        let (_, s) = train(&data, "warm", &hp, 11)?;
        let json = |r: &EvalReport| serde_json::to_string(r).expect("report serializes");
        Ok(vec![json(&s.baseline), json(&s.invnorm)])
    };
    let (a, b) = (run()?, run()?);
    Ok(Outcome::new(
        a == b,
        format!(
            "two runs, {} EvalReports byte-identical: {}",
            a.len(),
            a == b
        ),
    ))
}

fn main() {
    let mut suite = Suite { failures: 0 };
    let secs = Duration::from_secs;
    suite.check("1", "invertibility", Some(secs(30)), roundtrip);
    suite.check("2", "log-det oracle", Some(secs(60)), logdet);
    suite.check("3", "gradient checks", Some(secs(120)), gradients);
    suite.check("4", "instance-norm contract", None, || {
        instance_norm_contract().unwrap_or_else(Outcome::error)
    });
    suite.check("5", "style collapse", None, || {
        style_collapse().unwrap_or_else(Outcome::error)
    });
    if std::env::var_os("ACCEPTANCE_SKIP_EXPERIMENT").is_some() {
        println!("[SKIP] 6 leave-one-domain experiment: ACCEPTANCE_SKIP_EXPERIMENT is set");
    } else {
        suite.check(
            "6",
            "leave-one-domain experiment",
            Some(secs(30 * 60)),
            || experiment().unwrap_or_else(Outcome::error),
        );
    }
    suite.check("7", "serialization", None, || {
        serialization().unwrap_or_else(Outcome::error)
    });
    suite.check("8", "determinism", None, || {
        determinism().unwrap_or_else(Outcome::error)
    });
    if suite.failures > 0 {
        println!("{} criteria failed", suite.failures);
        std::process::exit(1);
    }
    println!("all criteria passed");
}
