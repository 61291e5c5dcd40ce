use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use detdisc_core::eval::{detect, map_from_detections, mined_precision, pr_curve, EvalConfig, GroundTruth};
use detdisc_core::gradcheck::{run_grad_check, GradCheckConfig, GradCheckReport};
use detdisc_core::io;
use detdisc_core::mining::{mine_dataset, MiningConfig};
use detdisc_core::synth::{generate, SynthTruth, TransformSpec};
use detdisc_core::trainer::{run_pipeline_with, PipelineEvent, TrainConfig, TrainReport};
use detdisc_core::{Dataset, SynthConfig};

use crate::args::{EvalArgs, GenSynthArgs, GradCheckArgs, MineArgs, TrainArgs};
use crate::config;
use crate::error::{CliError, CliResult};
use crate::manifest::RunRecord;

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const TRUTH_FILE: &str = "truth.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const REPORT_FILE: &str = "report.txt";
pub const MINED_FILE: &str = "mined.jsonl";
pub const METRICS_FILE: &str = "metrics.txt";
pub const PR_FILE: &str = "pr_curves.txt";
pub const GRADCHECK_FILE: &str = "gradcheck.txt";

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))
}

fn write_text(path: PathBuf, text: &str, rec: &mut RunRecord) -> CliResult<()> {
    std::fs::write(&path, text).map_err(CliError::io(&path))?;
    rec.outputs.push(path);
    Ok(())
}

fn load_dataset(path: &Path, rec: &mut RunRecord) -> CliResult<Dataset> {
    rec.inputs.push(path.to_path_buf());
    Ok(io::load_dataset(path)?)
}

pub fn gen_synth(args: &GenSynthArgs, rec: &mut RunRecord) -> CliResult<()> {
    let mut cfg: SynthConfig = config::load(args.config.as_deref())?;
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.noise_sigma {
        cfg.noise_sigma = v;
    }
    if let Some(v) = args.cluster_separation {
        cfg.cluster_separation = v;
    }
    if let Some(v) = args.feature_dim {
        cfg.feature_dim = v;
    }
    if let Some(v) = args.regions_per_bag {
        cfg.regions_per_bag = v;
    }
    if let Some(strength) = args.transform_strength {
        cfg.transform = Some(TransformSpec::Random { strength });
    }
    rec.config(args.config.as_deref(), &cfg);
    rec.seed = Some(cfg.seed);
    if let Some(p) = &args.config {
        rec.inputs.push(p.clone());
    }

    let out = generate(&cfg)?;
    create_dir(&args.out)?;
    for (name, d) in [(TRAIN_FILE, &out.train), (TEST_FILE, &out.test)] {
        let path = args.out.join(name);
        io::save_dataset(d, &path)?;
        rec.outputs.push(path);
    }
    let truth = args.out.join(TRUTH_FILE);
    io::save_truth(&out.truth, &truth)?;
    rec.outputs.push(truth);
    println!(
        "wrote {} training bags and {} test bags to {}",
        out.train.bags().count(),
        out.test.bags().count(),
        args.out.display()
    );
    Ok(())
}

fn train_config(args: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg: TrainConfig = config::load(args.config.as_deref())?;
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.rounds {
        cfg.outer_rounds = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.epochs_init {
        cfg.epochs.init = v;
    }
    if let Some(v) = args.epochs_strong {
        cfg.epochs.strong = v;
    }
    if let Some(v) = args.epochs_joint {
        cfg.epochs.joint = v;
    }
    if let Some(v) = args.top_k {
        cfg.mining.top_k = v;
    }
    if let Some(v) = args.repr_layers {
        cfg.repr.layers = v;
    }
    Ok(cfg)
}

pub fn train_report(report: &TrainReport, cfg: &TrainConfig, failure: Option<&str>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# training report");
    let _ = writeln!(
        s,
        "seed {}  rounds {}  lr {}  momentum {}  alpha {}  lambda {}",
        cfg.seed, cfg.outer_rounds, cfg.learning_rate, cfg.momentum, cfg.alpha, cfg.lambda
    );
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:<8} {:>5} {:>16} {:>16} {:>16}",
        "stage", "epoch", "total", "regularization", "data_loss"
    );
    for st in &report.stages {
        for t in &st.trace {
            let _ = writeln!(
                s,
                "{:<8} {:>5} {:>16.6} {:>16.6} {:>16.6}",
                st.stage.name(),
                t.epoch,
                t.total,
                t.regularization,
                t.data_loss
            );
        }
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<8} {:>11} {:>8}", "round", "assignments", "warnings");
    for r in &report.rounds {
        let _ = writeln!(s, "{:<8} {:>11} {:>8}", r.round, r.assignments.len(), r.warnings.len());
        for w in &r.warnings {
            let _ = writeln!(s, "  warning: {w}");
        }
    }
    if let Some(f) = failure {
        let _ = writeln!(s);
        let _ = writeln!(s, "aborted: {f}");
    }
    s
}

pub fn train(args: &TrainArgs, rec: &mut RunRecord) -> CliResult<()> {
    let cfg = train_config(args)?;
    rec.config(args.config.as_deref(), &cfg);
    rec.seed = Some(cfg.seed);
    if let Some(p) = &args.config {
        rec.inputs.push(p.clone());
    }
    let d = load_dataset(&args.data, rec)?;
    create_dir(&args.out)?;

    let mut write_err: Option<CliError> = None;
    let mut written = Vec::new();
    let mut save = |name: String, result: detdisc_core::Result<()>, written: &mut Vec<PathBuf>| match result {
        Ok(()) => written.push(args.out.join(name)),
        Err(e) => {
            write_err.get_or_insert(e.into());
        }
    };
    let outcome = run_pipeline_with(&d, &cfg, &mut |event| match event {
        PipelineEvent::StageDone { stage, model } => {
            let name = format!("{}.ckpt", stage.name());
            let r = io::save_model(model, &args.out.join(&name));
            save(name, r, &mut written);
        }
        PipelineEvent::Mined { round, assignments } => {
            let name = format!("round{round}.mined");
            let r = io::save_assignments(assignments, &args.out.join(&name));
            save(name, r, &mut written);
        }
    });
    rec.outputs.extend(written);
    if let Some(e) = write_err {
        return Err(e);
    }
    match outcome {
        Ok(report) => {
            let path = args.out.join(FINAL_CHECKPOINT);
            io::save_model(&report.model, &path)?;
            rec.outputs.push(path);
            write_text(args.out.join(REPORT_FILE), &train_report(&report, &cfg, None), rec)?;
            if let Some(last) = report.stages.last().and_then(|s| s.trace.last()) {
                println!("final objective {:.6} ({} stages)", last.total, report.stages.len());
            }
            Ok(())
        }
        Err(failure) => {
            let text = train_report(&failure.partial, &cfg, Some(&failure.error.to_string()));
            write_text(args.out.join(REPORT_FILE), &text, rec)?;
            Err(failure.error.into())
        }
    }
}

pub fn mine(args: &MineArgs, rec: &mut RunRecord) -> CliResult<()> {
    let mut cfg: MiningConfig = config::load(args.config.as_deref())?;
    if let Some(v) = args.top_k {
        cfg.top_k = v;
    }
    if let Some(v) = args.max_latent_iters {
        cfg.max_latent_iters = v;
    }
    if args.no_background_margin {
        cfg.use_background_margin = false;
    }
    rec.config(args.config.as_deref(), &cfg);
    if let Some(p) = &args.config {
        rec.inputs.push(p.clone());
    }
    rec.inputs.push(args.checkpoint.clone());
    let model = io::load_model(&args.checkpoint)?;
    let d = load_dataset(&args.data, rec)?;
    let assignments = mine_dataset(&model, &d, &cfg, args.round)?;
    create_dir(&args.out)?;
    let path = args.out.join(MINED_FILE);
    io::save_assignments(&assignments, &path)?;
    rec.outputs.push(path);
    println!("mined {} assignments", assignments.len());
    Ok(())
}

fn load_ground_truth(path: Option<&Path>, d: &Dataset, rec: &mut RunRecord) -> CliResult<GroundTruth> {
    let path = path.ok_or_else(|| CliError::Input("missing ground truth: pass --truth".into()))?;
    rec.inputs.push(path.to_path_buf());
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    let gt = match serde_json::from_str::<SynthTruth>(&text) {
        Ok(t) => GroundTruth {
            boxes: t.bags.into_iter().map(|(id, b)| (id, b.boxes)).collect(),
        },
        Err(_) => serde_json::from_str::<GroundTruth>(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: format!("not a ground-truth file: {e}"),
        })?,
    };
    let gt = gt.restricted_to(d);
    if gt.boxes.values().all(|m| m.values().all(Vec::is_empty)) {
        return Err(CliError::Input(format!(
            "missing ground truth: {} has no boxes for the bags being evaluated",
            path.display()
        )));
    }
    Ok(gt)
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |x| format!("{x:.6}"))
}

pub fn eval(args: &EvalArgs, rec: &mut RunRecord) -> CliResult<()> {
    let mut cfg: EvalConfig = config::load(args.config.as_deref())?;
    if let Some(v) = args.iou_match {
        cfg.iou_match = v;
    }
    if let Some(v) = args.nms_threshold {
        cfg.nms_threshold = v;
    }
    if let Some(v) = &args.categories {
        cfg.categories = Some(v.clone());
    }
    cfg.check()?;
    rec.config(args.config.as_deref(), &cfg);
    if let Some(p) = &args.config {
        rec.inputs.push(p.clone());
    }
    let d = load_dataset(&args.data, rec)?;
    let gt = load_ground_truth(args.truth.as_deref(), &d, rec)?;
    let cats = cfg.categories.clone().unwrap_or_else(|| gt.categories());

    let mut text = String::new();
    let mut curves = String::new();
    if let Some(ckpt) = &args.checkpoint {
        rec.inputs.push(ckpt.clone());
        let model = io::load_model(ckpt)?;
        let dets = detect(&model, &d, &cats, cfg.nms_threshold)?;
        let report = map_from_detections(&dets, &gt, &cats, cfg.iou_match);
        let _ = writeln!(text, "{:<24} {:>10}", "category", "ap");
        for (k, ap) in &report.per_category {
            let _ = writeln!(text, "{k:<24} {:>10}", fmt_metric(*ap));
        }
        let _ = writeln!(text, "{:<24} {:>10}", "mAP", fmt_metric(report.mean));
        if args.pr_curves {
            let _ = writeln!(curves, "category\trank\trecall\tprecision");
            for k in &cats {
                for (i, p) in pr_curve(&dets, &gt, k, cfg.iou_match)
                    .unwrap_or_default()
                    .iter()
                    .enumerate()
                {
                    let _ = writeln!(curves, "{k}\t{}\t{:.6}\t{:.6}", i + 1, p.recall, p.precision);
                }
            }
        }
    }
    if let Some(path) = &args.assignments {
        rec.inputs.push(path.clone());
        let a = io::load_assignments(path)?;
        let a: Vec<_> = a.into_iter().filter(|x| cats.contains(&x.category)).collect();
        let p = mined_precision(&a, &d, &gt, cfg.iou_match);
        let _ = writeln!(text, "{:<24} {:>10}", "mined_precision", fmt_metric(p));
    }
    print!("{text}");
    create_dir(&args.out)?;
    write_text(args.out.join(METRICS_FILE), &text, rec)?;
    if args.pr_curves && !curves.is_empty() {
        write_text(args.out.join(PR_FILE), &curves, rec)?;
    }
    Ok(())
}

pub fn grad_check_report(r: &GradCheckReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<16} {:>14}  location", "objective", "max_rel_error");
    for (target, worst) in r.worst_by_target() {
        let _ = writeln!(
            s,
            "{target:<16} {:>14.3e}  fixture {} {} (analytic {:.6e}, numeric {:.6e})",
            worst.max_rel_error, worst.fixture, worst.worst_param, worst.analytic, worst.numeric
        );
    }
    let fixtures = r.results.iter().map(|x| x.fixture).max().map_or(0, |m| m + 1);
    let _ = writeln!(
        s,
        "{} checks over {fixtures} fixtures ({} resampled), tolerance {:e}: {}",
        r.results.len(),
        r.resamples,
        r.tolerance,
        if r.passed() { "PASS" } else { "FAIL" }
    );
    s
}

pub fn grad_check(args: &GradCheckArgs, rec: &mut RunRecord) -> CliResult<()> {
    let mut cfg: GradCheckConfig = config::load(args.config.as_deref())?;
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.fixtures {
        cfg.fixtures = v;
    }
    if let Some(v) = &args.dims {
        cfg.dims = Some(v.clone());
    }
    if args.corrupt_gradient {
        cfg.corrupt = true;
    }
    rec.config(args.config.as_deref(), &cfg);
    rec.seed = Some(cfg.seed);
    if let Some(p) = &args.config {
        rec.inputs.push(p.clone());
    }
    let report = run_grad_check(&cfg)?;
    let text = grad_check_report(&report);
    print!("{text}");
    create_dir(&args.out)?;
    write_text(args.out.join(GRADCHECK_FILE), &text, rec)?;
    if report.passed() {
        Ok(())
    } else {
        let worst = report
            .failures()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .expect("failed report has failures");
        Err(CliError::CheckFailed(format!(
            "gradient check failed: {} relative error {:.3e} at {} (fixture {})",
            worst.target, worst.max_rel_error, worst.worst_param, worst.fixture
        )))
    }
}
