use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use invnorm::harness::{
    accuracy_svg, comparison_csv, comparison_table, default_domains, evaluate, export_dataset,
    generate_dataset, import_dataset, load_classifier, save_classifier, train_variant, DomainSpec,
    EvalReport, HyperParams, TrainedModel, Variant,
};
use invnorm::invnorm::{load_model, save_model};
use invnorm::verify::{self, LOGDET_TOL};
use invnorm::Error;
use log::info;

use crate::{
    Cli, Command, EvalArgs, GenDataArgs, GradcheckArgs, LogdetArgs, ReportArgs, RoundtripArgs,
    TrainArgs,
};

pub enum Failure {
    /// Bad flags, config values or input paths.
    Usage(String),
    /// A check ran and did not pass, or training failed.
    Failed(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Failed(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Failed(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Format(_) => Failure::Usage(e.to_string()),
            _ => Failure::Failed(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

pub fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Roundtrip(a) => roundtrip(cli, a),
        Command::Gradcheck(a) => gradcheck(cli, a),
        Command::LogdetCheck(a) => logdet_check(cli, a),
        Command::GenData(a) => gen_data(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Report(a) => report(cli, a),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Outcome {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| Failure::Failed(format!("creating {}: {e}", parent.display())))?;
    }
    fs::write(path, contents)
        .map_err(|e| Failure::Failed(format!("writing {}: {e}", path.display())))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn require_dir(path: &Path, what: &str) -> Outcome {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Failure::Usage(format!(
            "{what} directory {} not found",
            path.display()
        )))
    }
}

fn roundtrip(cli: &Cli, a: &RoundtripArgs) -> Outcome {
    if !(a.tolerance >= 0.0) || a.trials == 0 || a.shapes.is_empty() {
        return Err(Failure::Usage(
            "need tol >= 0, trials >= 1 and at least one shape".into(),
        ));
    }
    let results = verify::roundtrip_suite(&a.shapes, a.trials, cli.seed, a.hidden)?;
    println!(
        "{:<14} {:>6} {:>12} {:>14}  status",
        "shape", "trials", "max_err", "squeeze_exact"
    );
    let mut worst: Option<&verify::RoundTripResult> = None;
    for r in &results {
        let ok = r.max_err < a.tolerance && r.squeeze_exact;
        println!(
            "{:<14} {:>6} {:>12.3e} {:>14}  {}",
            r.shape.to_string(),
            r.trials,
            r.max_err,
            r.squeeze_exact,
            if ok { "pass" } else { "FAIL" }
        );
        if !ok && worst.is_none_or(|w| r.max_err > w.max_err) {
            worst = Some(r);
        }
    }
    match worst {
        None => Ok(()),
        Some(w) => Err(Failure::Failed(format!(
            "round trip above tolerance {:e}; worst shape {} with max error {:.3e}",
            a.tolerance, w.shape, w.max_err
        ))),
    }
}

fn gradcheck(cli: &Cli, a: &GradcheckArgs) -> Outcome {
    if !(a.eps > 0.0) || !(a.rel_tol >= 0.0) {
        return Err(Failure::Usage("need eps > 0 and rel-tol >= 0".into()));
    }
    let rows = verify::gradcheck_suite(&a.layers, a.eps, cli.seed)?;
    println!(
        "{:<18} {:>6} {:>14} {:>14} {:>9}  status",
        "layer", "seed", "param_rel_err", "input_rel_err", "compared"
    );
    let mut failed = Vec::new();
    for r in &rows {
        let ok = r.passed(a.rel_tol);
        println!(
            "{:<18} {:>6} {:>14.3e} {:>14.3e} {:>9}  {}",
            r.layer.to_string(),
            r.seed,
            r.params.max_rel_err,
            r.input.max_rel_err,
            r.params.compared + r.input.compared,
            if ok { "pass" } else { "FAIL" }
        );
        if !ok {
            failed.push(r.layer.to_string());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Failed(format!(
            "relative error at or above {:e} for {}",
            a.rel_tol,
            failed.join(", ")
        )))
    }
}

fn logdet_check(cli: &Cli, a: &LogdetArgs) -> Outcome {
    let rows = verify::logdet_suite(a.max_dim, cli.seed)?;
    println!(
        "{:<34} {:>10} {:>14} {:>14} {:>10}  status",
        "layer", "input", "dense", "layer", "abs_err"
    );
    let mut failed = Vec::new();
    for r in &rows {
        let ok = r.passed();
        println!(
            "{:<34} {:>10} {:>14.6} {:>14.6} {:>10.2e}  {}",
            r.name,
            r.report.input_shape.to_string(),
            r.report.dense_logdet,
            r.report.layer_logdet,
            r.report.abs_err,
            if ok { "pass" } else { "FAIL" }
        );
        if !ok {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Failed(format!(
            "log-det error at or above {LOGDET_TOL:e} for {}",
            failed.join(", ")
        )))
    }
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> Outcome {
    let domains: Vec<DomainSpec> = match &a.domains {
        None => default_domains(),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
        }
    };
    let data = generate_dataset(cli.seed, &domains, a.n_per_domain, a.classes, a.hw)?;
    fs::create_dir_all(&cli.output_dir)
        .map_err(|e| Failure::Failed(format!("creating {}: {e}", cli.output_dir.display())))?;
    export_dataset(&data, &cli.output_dir, Some(&domains), Some(cli.seed))?;
    info!(
        "wrote {} images ({} domains x {}) to {}",
        data.len(),
        domains.len(),
        a.n_per_domain,
        cli.output_dir.display()
    );
    Ok(())
}

const BASELINE_CNN: &str = "baseline.cnn";
const INVNORM_FLOW: &str = "invnorm.flow";
const INVNORM_CNN: &str = "invnorm.cnn";

fn train(cli: &Cli, a: &TrainArgs) -> Outcome {
    require_dir(&a.data, "dataset")?;
    let data = import_dataset(&a.data)?;
    let hp = HyperParams {
        epochs: a.epochs,
        lr: a.lr,
        lr_min: 0.0,
        momentum: a.momentum,
        batch_size: a.batch_size,
        steps_per_block: a.steps_per_block,
        hidden: a.hidden,
        grad_clip: a.grad_clip,
    };
    hp.validate()?;
    let (train_ids, _) = data.leave_one_out(&a.held_out)?;
    for v in a.variant.variants() {
        info!(
            "training {v} on {} samples, {} held out",
            train_ids.len(),
            a.held_out
        );
        let m = train_variant(v, &data, &train_ids, &hp, cli.seed)?;
        info!("{v}: final loss {:.4}", m.final_loss);
        match v {
            Variant::Baseline => save_cnn(&m, &cli.output_dir.join(BASELINE_CNN))?,
            Variant::InvNorm => {
                let flow = m.invnorm.as_ref().expect("invnorm variant has a flow");
                fs::create_dir_all(&cli.output_dir).map_err(|e| Failure::Failed(e.to_string()))?;
                save_model(flow, cli.output_dir.join(INVNORM_FLOW))?;
                save_cnn(&m, &cli.output_dir.join(INVNORM_CNN))?;
            }
        }
    }
    Ok(())
}

fn save_cnn(m: &TrainedModel, path: &Path) -> Outcome {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Failure::Failed(e.to_string()))?;
    }
    save_classifier(&m.classifier, path)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn load_trained(dir: &Path, v: Variant) -> Result<TrainedModel, Failure> {
    let need = |name: &str| -> Result<PathBuf, Failure> {
        let p = dir.join(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Failure::Usage(format!(
                "model file {} not found",
                p.display()
            )))
        }
    };
    let (invnorm, cnn) = match v {
        Variant::Baseline => (None, need(BASELINE_CNN)?),
        Variant::InvNorm => (Some(load_model(need(INVNORM_FLOW)?)?), need(INVNORM_CNN)?),
    };
    Ok(TrainedModel {
        variant: v,
        invnorm,
        classifier: load_classifier(cnn)?,
        final_loss: f64::NAN,
    })
}

pub fn report_name(r: &EvalReport) -> String {
    format!(
        "report_{}_{}_s{}.json",
        r.variant, r.held_out_domain, r.seed
    )
}

fn eval(cli: &Cli, a: &EvalArgs) -> Outcome {
    require_dir(&a.data, "dataset")?;
    require_dir(&a.models, "models")?;
    let data = import_dataset(&a.data)?;
    data.domain_index(&a.held_out)?;
    for v in a.variant.variants() {
        let m = load_trained(&a.models, v)?;
        let r = evaluate(&m, &data, &a.held_out, cli.seed)?;
        println!(
            "{v}: held-out {} accuracy {:.4}, macro-F1 {:.4}, style gap {:.4}",
            a.held_out, r.held_out_accuracy, r.macro_f1, r.feature_style_gap
        );
        let json =
            serde_json::to_string_pretty(&r).map_err(|e| Failure::Failed(e.to_string()))? + "\n";
        write(&cli.output_dir.join(report_name(&r)), json)?;
    }
    Ok(())
}

fn report(cli: &Cli, a: &ReportArgs) -> Outcome {
    let reports = a
        .reports
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str::<EvalReport>(&text)
                .map_err(|e| Failure::Usage(format!("{} is not an EvalReport: {e}", p.display())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    print!("{}", comparison_table(&reports));
    write(
        &cli.output_dir.join("comparison.csv"),
        comparison_csv(&reports),
    )?;
    if a.svg {
        write(&cli.output_dir.join("accuracy.svg"), accuracy_svg(&reports))?;
    }
    Ok(())
}
