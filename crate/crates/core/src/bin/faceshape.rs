//! Command-line front end.
//!
//! Exit codes: 0 success, 1 verification found a fake, 2 input error,
//! 3 internal error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use faceshape::calibration::{calibrate_threshold, CalibrationResult};
use faceshape::detector::{Aggregation, Label, VerificationReport, Verifier};
use faceshape::experiment::{ablate_k, evaluate_world, fit_world, run_ladder, ConditionMetrics, ExperimentOptions, LadderThreshold};
use faceshape::format::{ser_f64, ser_vec, FORMAT_VERSION};
use faceshape::projection::{load_frames, LandmarkFrame};
use faceshape::synthetic::{
    anisotropy_scenario, describe_world, isotropic_control, laundering_ladder, write_world, WorldConfig, DEFAULT_ANISOTROPY,
};
use faceshape::template::{enroll, select_features, EnrollOptions, Metric, Shrinkage, Template, DEFAULT_FEATURE_DIM, DEFAULT_MIN_FRAMES};
use faceshape::{fit, synthesize_basis, Error, FitOptions, Landmarks2D, ShapeBasis};

#[derive(Parser)]
#[command(name = "faceshape", version, about = "Face-swap detection from 3D facial shape consistency")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic shape basis.
    Basis(BasisArgs),
    /// Fit pose and shape coefficients to landmark frames.
    Fit(FitArgs),
    /// Enroll a subject template from landmark frames.
    Enroll(EnrollArgs),
    /// Verify landmark frames against a subject template.
    Verify(VerifyArgs),
    /// Choose a decision threshold from genuine and fake distances.
    Calibrate(CalibrateArgs),
    /// Run a synthetic experiment end to end.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct BasisOpt {
    /// Basis file; defaults to $SHAPE_BASIS.
    #[arg(long, env = "SHAPE_BASIS")]
    basis: PathBuf,
}

#[derive(Args)]
struct FitOpts {
    #[arg(long, default_value_t = 20)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 1e-3)]
    lambda_id: f64,
    #[arg(long, default_value_t = 1e-3)]
    lambda_exp: f64,
}

impl FitOpts {
    fn options(&self) -> FitOptions {
        FitOptions {
            max_iters: self.max_iters,
            tol: self.tol,
            lambda_id: self.lambda_id,
            lambda_exp: self.lambda_exp,
        }
    }
}

#[derive(Args)]
struct BasisArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 68)]
    landmarks: usize,
    #[arg(long, default_value_t = 40)]
    kid: usize,
    #[arg(long, default_value_t = 10)]
    kexp: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    basis: BasisOpt,
    /// Landmark files.
    #[arg(long, num_args = 1.., required = true)]
    frames: Vec<PathBuf>,
    /// Write fitted parameters here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    fit: FitOpts,
}

#[derive(Args)]
struct EnrollArgs {
    #[command(flatten)]
    basis: BasisOpt,
    #[arg(long, num_args = 1.., required = true)]
    frames: Vec<PathBuf>,
    #[arg(long)]
    subject: String,
    #[arg(long, default_value_t = DEFAULT_FEATURE_DIM)]
    k: usize,
    #[arg(long, default_value_t = DEFAULT_MIN_FRAMES)]
    min_frames: usize,
    /// Covariance shrinkage added to the diagonal; automatic when omitted.
    #[arg(long)]
    shrinkage: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    fit: FitOpts,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregationArg {
    Majority,
    Mean,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Mahalanobis,
    Cosine,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Mahalanobis => Metric::Mahalanobis,
            MetricArg::Cosine => Metric::Cosine,
        }
    }
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    basis: BasisOpt,
    #[arg(long)]
    template: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    frames: Vec<PathBuf>,
    #[arg(long)]
    threshold: f64,
    #[arg(long, value_enum, default_value = "majority")]
    aggregation: AggregationArg,
    #[arg(long, value_enum, default_value = "mahalanobis")]
    metric: MetricArg,
    /// Write the per-frame report here.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    fit: FitOpts,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Genuine distances, one per line.
    #[arg(long, requires = "fake_scores", conflicts_with_all = ["templates", "genuine_frames", "fake_frames"])]
    genuine_scores: Option<PathBuf>,
    /// Fake distances, one per line.
    #[arg(long, requires = "genuine_scores")]
    fake_scores: Option<PathBuf>,
    /// Templates to score labeled frames against, matched by subject id.
    #[arg(long, num_args = 1.., requires_all = ["genuine_frames", "fake_frames"])]
    templates: Vec<PathBuf>,
    /// Frames that really show the subject they claim.
    #[arg(long, num_args = 1..)]
    genuine_frames: Vec<PathBuf>,
    /// Frames whose face shape belongs to someone other than the claimed subject.
    #[arg(long, num_args = 1..)]
    fake_frames: Vec<PathBuf>,
    /// Basis for end-to-end calibration; defaults to $SHAPE_BASIS.
    #[arg(long, env = "SHAPE_BASIS")]
    basis: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "mahalanobis")]
    metric: MetricArg,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    fit: FitOpts,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    basis: BasisOpt,
    #[arg(long, default_value_t = 50)]
    subjects: usize,
    /// Genuine frames per subject, enrollment plus held out.
    #[arg(long, default_value_t = 150)]
    frames: usize,
    #[arg(long, default_value_t = 100)]
    enroll_frames: usize,
    /// Landmark noise in pixels.
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_FEATURE_DIM)]
    k: usize,
    /// Metrics to evaluate.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "mahalanobis")]
    metric: Vec<MetricArg>,
    /// Sweep the laundering noise ladder.
    #[arg(long)]
    ladder: bool,
    /// Keep the thresholds calibrated on the first ladder rung instead of recalibrating per rung.
    #[arg(long, requires = "ladder")]
    fixed_threshold: bool,
    /// Correlated identity jitter proportional to the component scales.
    #[arg(long, conflicts_with = "isotropic_control")]
    anisotropic: bool,
    /// Independent identity jitter with the same total variance as --anisotropic.
    #[arg(long)]
    isotropic_control: bool,
    /// Jitter strength relative to the identity component scales.
    #[arg(long, default_value_t = DEFAULT_ANISOTROPY)]
    jitter: f64,
    /// Feature dimensions to compare, e.g. 20,40,60,80,100.
    #[arg(long, value_delimiter = ',')]
    ablate_k: Vec<usize>,
    /// Calibrate one threshold per subject.
    #[arg(long)]
    per_subject: bool,
    /// Also write every rendered frame next to the manifest.
    #[arg(long)]
    write_frames: bool,
    #[arg(long)]
    min_frames: Option<usize>,
    #[command(flatten)]
    fit: FitOpts,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Basis(a) => cmd_basis(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Enroll(a) => cmd_enroll(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Simulate(a) => cmd_simulate(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 3 })
        }
    }
}

type CmdResult = faceshape::Result<ExitCode>;

fn write_doc<T: Serialize>(path: &Path, doc: &T) -> faceshape::Result<()> {
    let text = faceshape::format::to_string(doc)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn load_all_frames(paths: &[PathBuf]) -> faceshape::Result<Vec<LandmarkFrame>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(load_frames(p)?);
    }
    Ok(out)
}

fn cmd_basis(a: BasisArgs) -> CmdResult {
    let basis = synthesize_basis(a.landmarks, a.kid, a.kexp, a.seed)?;
    basis.save(&a.out)?;
    println!("wrote {} ({})", a.out.display(), basis.basis_id());
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct FitRecord {
    subject_label: String,
    frame_index: usize,
    #[serde(serialize_with = "ser_f64")]
    scale: f64,
    /// Row-major.
    #[serde(serialize_with = "ser_vec")]
    rotation: Vec<f64>,
    #[serde(serialize_with = "ser_vec")]
    translation: Vec<f64>,
    #[serde(serialize_with = "ser_vec")]
    alpha_id: Vec<f64>,
    #[serde(serialize_with = "ser_vec")]
    alpha_exp: Vec<f64>,
    #[serde(serialize_with = "ser_f64")]
    residual_rms: f64,
    iterations: usize,
    converged: bool,
}

#[derive(Serialize)]
struct FitDocument {
    format_version: u32,
    basis_id: String,
    fits: Vec<FitRecord>,
}

fn cmd_fit(a: FitArgs) -> CmdResult {
    let basis = ShapeBasis::load(&a.basis.basis)?;
    let opts = a.fit.options();
    let mut fits = Vec::new();
    for frame in load_all_frames(&a.frames)? {
        let r = fit(&frame.landmarks()?, &basis, &opts)?;
        let rot = r.pose.rotation();
        println!(
            "{} frame {}: residual {:.4} px, {} iterations{}",
            frame.subject_label,
            frame.frame_index,
            r.residual_rms,
            r.iterations,
            if r.converged { "" } else { " (not converged)" }
        );
        fits.push(FitRecord {
            subject_label: frame.subject_label,
            frame_index: frame.frame_index,
            scale: r.pose.scale(),
            rotation: (0..9).map(|i| rot[(i / 3, i % 3)]).collect(),
            translation: vec![r.pose.translation().x, r.pose.translation().y],
            alpha_id: r.coeffs.alpha_id.as_slice().to_vec(),
            alpha_exp: r.coeffs.alpha_exp.as_slice().to_vec(),
            residual_rms: r.residual_rms,
            iterations: r.iterations,
            converged: r.converged,
        });
    }
    if let Some(out) = a.out {
        write_doc(
            &out,
            &FitDocument {
                format_version: FORMAT_VERSION,
                basis_id: basis.basis_id().to_string(),
                fits,
            },
        )?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_enroll(a: EnrollArgs) -> CmdResult {
    let basis = ShapeBasis::load(&a.basis.basis)?;
    let opts = a.fit.options();
    let frames = load_all_frames(&a.frames)?;
    // Cheap checks first, so a short enrollment fails before any fitting.
    let enroll_opts = EnrollOptions {
        shrinkage: a.shrinkage.map_or(Shrinkage::Auto, Shrinkage::Fixed),
        min_frames: a.min_frames,
    };
    if frames.len() < a.k {
        return Err(Error::TooFewFrames { frames: frames.len(), k: a.k });
    }
    if frames.len() < a.min_frames {
        return Err(Error::InvalidParameter(format!(
            "enrollment needs at least {} frames, got {} (see --min-frames)",
            a.min_frames,
            frames.len()
        )));
    }
    let mut features = Vec::with_capacity(frames.len());
    for frame in &frames {
        let r = fit(&frame.landmarks()?, &basis, &opts)?;
        features.push(select_features(&r.coeffs, a.k)?);
    }
    let template = enroll(&features, &a.subject, basis.basis_id(), &enroll_opts)?;
    template.save(&a.out)?;
    println!("enrolled {} from {} frames (k = {}) -> {}", a.subject, frames.len(), a.k, a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(a: VerifyArgs) -> CmdResult {
    let basis = ShapeBasis::load(&a.basis.basis)?;
    let template = Template::load(&a.template)?;
    let verifier = Verifier::new(&basis, &template, a.threshold, a.fit.options())?.with_metric(a.metric.into());
    let frames = load_all_frames(&a.frames)?
        .into_iter()
        .map(|f| Ok((f.frame_index, f.landmarks()?)))
        .collect::<faceshape::Result<Vec<(usize, Landmarks2D)>>>()?;
    let aggregation = match a.aggregation {
        AggregationArg::Majority => Aggregation::Majority,
        AggregationArg::Mean => Aggregation::MeanDistance,
    };
    let verdict = verifier.verify_video(&frames, aggregation)?;
    let report = VerificationReport::from(&verdict);
    if let Some(path) = &a.report {
        report.save(path)?;
    }
    for s in &verdict.skipped {
        eprintln!("skipped frame {}: {}", s.frame_index, s.reason);
    }
    let label = match verdict.label {
        Label::Genuine => "genuine",
        Label::Fake => "fake",
    };
    println!(
        "{}: {} ({} frames, {} skipped, fake fraction {:.3}, mean distance {:.3}, threshold {})",
        verdict.subject_id,
        label,
        verdict.frame_verdicts.len(),
        verdict.skipped.len(),
        verdict.fake_fraction,
        verdict.mean_distance,
        verdict.threshold
    );
    Ok(match verdict.label {
        Label::Genuine => ExitCode::SUCCESS,
        Label::Fake => ExitCode::from(1),
    })
}

fn read_scores(path: &Path) -> faceshape::Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let v: f64 = l
                .trim()
                .parse()
                .map_err(|_| Error::schema(path, format!("line {}: '{}' is not a number", i + 1, l.trim())))?;
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::schema(path, format!("line {}: distance must be finite and nonnegative", i + 1)));
            }
            Ok(v)
        })
        .collect()
}

fn frame_scores(
    frames: &[LandmarkFrame],
    templates: &[Template],
    basis: &ShapeBasis,
    metric: Metric,
    opts: &FitOptions,
) -> faceshape::Result<Vec<f64>> {
    frames
        .iter()
        .map(|f| {
            let t = templates
                .iter()
                .find(|t| t.subject_id() == f.subject_label)
                .ok_or_else(|| Error::InvalidParameter(format!("no template for subject '{}'", f.subject_label)))?;
            let verifier = Verifier::new(basis, t, f64::INFINITY, opts.clone())?.with_metric(metric);
            Ok(verifier.frame_distance(&f.landmarks()?)?.0)
        })
        .collect()
}

fn cmd_calibrate(a: CalibrateArgs) -> CmdResult {
    let (genuine, fake) = match (&a.genuine_scores, &a.fake_scores) {
        (Some(g), Some(f)) => (read_scores(g)?, read_scores(f)?),
        _ => {
            if a.templates.is_empty() {
                return Err(Error::InvalidParameter(
                    "give --genuine-scores/--fake-scores or --templates with --genuine-frames/--fake-frames".into(),
                ));
            }
            let basis_path = a.basis.as_ref().ok_or_else(|| Error::InvalidParameter("--basis (or SHAPE_BASIS) is required".into()))?;
            let basis = ShapeBasis::load(basis_path)?;
            let templates = a.templates.iter().map(|p| Template::load(p)).collect::<faceshape::Result<Vec<_>>>()?;
            let opts = a.fit.options();
            let metric = a.metric.into();
            (
                frame_scores(&load_all_frames(&a.genuine_frames)?, &templates, &basis, metric, &opts)?,
                frame_scores(&load_all_frames(&a.fake_frames)?, &templates, &basis, metric, &opts)?,
            )
        }
    };
    let result: CalibrationResult = calibrate_threshold(&genuine, &fake)?;
    println!(
        "threshold {} (acc genuine {:.4}, acc fake {:.4}, overall {:.4}; n = {} + {})",
        result.threshold, result.acc_genuine, result.acc_fake, result.acc_overall, result.n_genuine, result.n_fake
    );
    if let Some(out) = &a.out {
        write_doc(out, &result)?;
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct MetricsDocument {
    format_version: u32,
    basis_id: String,
    config: WorldConfig,
    /// Base world, one row per metric.
    conditions: Vec<ConditionMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ladder: Option<Vec<ConditionMetrics>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ladder_threshold: Option<LadderThreshold>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ablate_k: Option<Vec<ConditionMetrics>>,
}

fn print_row(tag: &str, c: &ConditionMetrics) {
    println!(
        "{tag:<10} {:<12} k={:<3} noise={:<4} auc={:.4} acc={:.4} (genuine {:.4}, fake {:.4})",
        format!("{:?}", c.metric).to_lowercase(),
        c.k,
        c.landmark_noise_px,
        c.auc,
        c.acc,
        c.acc_genuine,
        c.acc_fake
    );
}

fn cmd_simulate(a: SimulateArgs) -> CmdResult {
    let basis = ShapeBasis::load(&a.basis.basis)?;
    let mut config = WorldConfig {
        n_subjects: a.subjects,
        frames_per_subject: a.frames,
        enroll_frames: a.enroll_frames,
        landmark_noise_px: a.noise,
        seed: a.seed,
        ..WorldConfig::default()
    };
    if a.anisotropic {
        config = anisotropy_scenario(&basis, &config, a.jitter);
    } else if a.isotropic_control {
        config = isotropic_control(&basis, &config, a.jitter);
    }
    config.validate()?;
    let mut opts = ExperimentOptions {
        fit: a.fit.options(),
        per_subject: a.per_subject,
        ladder_threshold: if a.fixed_threshold { LadderThreshold::Fixed } else { LadderThreshold::PerRung },
        ..ExperimentOptions::default()
    };
    if let Some(m) = a.min_frames {
        opts.enroll.min_frames = m;
    }
    let metrics: Vec<Metric> = a.metric.iter().map(|&m| m.into()).collect();

    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    if a.write_frames {
        write_world(&a.out, &basis, &config)?;
    } else {
        describe_world(&basis, &config)?.save(&a.out.join("manifest.json"))?;
    }

    let fits = fit_world(&basis, &config, &opts.fit)?;
    if fits.skipped > 0 {
        eprintln!("{} frames could not be fitted and were skipped", fits.skipped);
    }
    let conditions = metrics
        .iter()
        .map(|&m| evaluate_world(&fits, m, a.k, &opts))
        .collect::<faceshape::Result<Vec<_>>>()?;
    for c in &conditions {
        print_row("base", c);
    }
    let ladder = if a.ladder {
        let rows = run_ladder(&basis, &fits, &laundering_ladder(&config), &metrics, a.k, &opts)?;
        for c in &rows {
            print_row("ladder", c);
        }
        Some(rows)
    } else {
        None
    };
    let ablation = if a.ablate_k.is_empty() {
        None
    } else {
        let mut rows = Vec::new();
        for &m in &metrics {
            rows.extend(ablate_k(&fits, &a.ablate_k, m, &opts)?);
        }
        for c in &rows {
            print_row("ablate-k", c);
        }
        Some(rows)
    };
    let doc = MetricsDocument {
        format_version: FORMAT_VERSION,
        basis_id: basis.basis_id().to_string(),
        config,
        conditions,
        ladder_threshold: ladder.as_ref().map(|_| opts.ladder_threshold),
        ladder,
        ablate_k: ablation,
    };
    let path = a.out.join("metrics.json");
    write_doc(&path, &doc)?;
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}
