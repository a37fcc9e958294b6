//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use faceshape::calibration::{auc, calibrate_threshold, evaluate};
use faceshape::detector::{aggregate, Aggregation, Label, Verdict, VerificationReport, DISPLAY_CAP};
use faceshape::experiment::{fit_world, run_ladder, ExperimentOptions, WorldFits};
use faceshape::synthetic::{anisotropy_scenario, isotropic_control, laundering_ladder, PoseRanges, WorldConfig, DEFAULT_ANISOTROPY};
use faceshape::template::{enroll, mahalanobis, EnrollOptions, Metric, ShapeFeature, Shrinkage, Template};
use faceshape::{fit, project, synthesize_basis, Coefficients, Error, FitOptions, Pose, ShapeBasis};
use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::Value;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

fn random_template(rng: &mut ChaCha8Rng) -> Template {
    let k = rng.random_range(2..=40);
    let n = k + rng.random_range(5..100);
    let mu = gaussian(rng, k) * rng.random_range(0.1..10.0);
    let mix = DMatrix::from_fn(k, k, |_, _| rng.sample::<f64, _>(StandardNormal)) * rng.random_range(0.1..3.0);
    let features: Vec<ShapeFeature> = (0..n).map(|_| ShapeFeature::new(&mu + &mix * gaussian(rng, k)).unwrap()).collect();
    enroll(&features, "s", "b", &EnrollOptions { min_frames: 1, ..EnrollOptions::default() }).unwrap()
}

/// Distance via an LU solve of the regularized covariance, ignoring the
/// template's cached inverse.
fn oracle_distance(t: &Template, x: &DVector<f64>) -> f64 {
    let k = t.k();
    let reg = t.covariance() + DMatrix::identity(k, k) * t.shrinkage();
    let d = x - t.mean();
    let y = reg.lu().solve(&d).expect("regularized covariance is invertible");
    d.dot(&y).max(0.0).sqrt()
}

fn mahalanobis_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let templates: Vec<Template> = (0..1000).map(|_| random_template(&mut rng)).collect();
    let queries: Vec<DVector<f64>> = templates
        .iter()
        .map(|t| t.mean() + gaussian(&mut rng, t.k()) * rng.random_range(0.1..10.0))
        .collect();
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for (t, q) in templates.iter().zip(&queries) {
        let d = mahalanobis(t, &ShapeFeature::new(q.clone()).unwrap()).unwrap();
        let o = oracle_distance(t, q);
        worst = worst.max((d - o).abs() / o);
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-8 && elapsed < Duration::from_secs(5),
        format!("max relative error {worst:.2e}, {elapsed:.2?} for 1000 pairs"),
    )
}

fn center_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let worst = (0..100)
        .map(|_| {
            let t = random_template(&mut rng);
            mahalanobis(&t, &ShapeFeature::new(t.mean().clone()).unwrap()).unwrap()
        })
        .fold(0.0, f64::max);
    outcome(worst <= 1e-12, format!("max distance at the mean {worst:.2e}"))
}

fn random_pose(rng: &mut ChaCha8Rng, ranges: &PoseRanges) -> Pose {
    let mut deg = |r: f64| rng.random_range(-r..=r).to_radians();
    let (yaw, pitch, roll) = (deg(ranges.yaw_deg), deg(ranges.pitch_deg), deg(ranges.roll_deg));
    let t = Vector2::new(rng.random_range(220.0..420.0), rng.random_range(140.0..340.0));
    Pose::from_angles(rng.random_range(0.7..1.6), yaw, pitch, roll, t).unwrap()
}

fn random_coeffs(rng: &mut ChaCha8Rng, b: &ShapeBasis) -> Coefficients {
    let mut draw = |s: &DVector<f64>| s.map(|s| s * rng.sample::<f64, _>(StandardNormal));
    Coefficients::new(draw(b.id_scales()), draw(b.exp_scales())).unwrap()
}

fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

fn fit_recovery(basis: &ShapeBasis) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let ranges = PoseRanges::default();
    let cases: Vec<_> = (0..200)
        .map(|_| {
            let truth = random_coeffs(&mut rng, basis);
            let obs = project(&random_pose(&mut rng, &ranges), &basis.reconstruct(&truth).unwrap());
            (truth, obs)
        })
        .collect();
    // Noiseless recovery is only exact without the ridge term.
    let opts = FitOptions::unregularized();
    let start = Instant::now();
    let (mut worst_alpha, mut worst_rms, mut not_converged): (f64, f64, usize) = (0.0, 0.0, 0);
    for (truth, obs) in &cases {
        let r = fit(obs, basis, &opts).unwrap();
        worst_alpha = worst_alpha.max(rel(&r.coeffs.alpha_id, &truth.alpha_id));
        worst_rms = worst_rms.max(r.residual_rms);
        not_converged += usize::from(!r.converged);
    }
    let elapsed = start.elapsed();
    outcome(
        worst_alpha <= 1e-3 && worst_rms <= 1e-6 && not_converged == 0 && elapsed < Duration::from_secs(30),
        format!(
            "max alpha_id error {worst_alpha:.2e}, max residual {worst_rms:.2e} px, {not_converged} unconverged, {elapsed:.2?}"
        ),
    )
}

fn fitting_invariances(basis: &ShapeBasis) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let ranges = PoseRanges::default();
    let opts = FitOptions::default();
    let mut worst = [0.0f64; 3];
    for _ in 0..100 {
        let clean = project(&random_pose(&mut rng, &ranges), &basis.reconstruct(&random_coeffs(&mut rng, basis)).unwrap());
        let obs = faceshape::Landmarks2D::new(clean.points.map(|v| v + 0.5 * rng.sample::<f64, _>(StandardNormal))).unwrap();
        let base = fit(&obs, basis, &opts).unwrap().coeffs.alpha_id;

        let shift = Vector2::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
        let c: f64 = rng.random_range(0.5..=2.0);
        let centroid = obs.centroid();
        let a: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let rot = Matrix2::new(a.cos(), -a.sin(), a.sin(), a.cos());
        let variants = [
            obs.transformed(&Matrix2::identity(), &shift),
            obs.transformed(&(Matrix2::identity() * c), &(centroid * (1.0 - c))),
            obs.transformed(&rot, &(centroid - rot * centroid)),
        ];
        for (w, v) in worst.iter_mut().zip(&variants) {
            *w = w.max(rel(&fit(v, basis, &opts).unwrap().coeffs.alpha_id, &base));
        }
    }
    outcome(
        worst.iter().all(|&w| w <= 1e-6),
        format!(
            "max alpha_id change: translation {:.2e}, scaling {:.2e}, in-plane rotation {:.2e}",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn scores_of(fits: &WorldFits, metric: Metric) -> (Vec<f64>, Vec<f64>) {
    let templates = fits.templates(20, &EnrollOptions::default()).unwrap();
    let s = fits.scores(&templates, metric).unwrap();
    (s.genuine, s.fake)
}

fn separation(fits: &WorldFits, elapsed: Duration) -> Outcome {
    let (g, f) = scores_of(fits, Metric::Mahalanobis);
    let a = auc(&g, &f).unwrap();
    let c = calibrate_threshold(&g, &f).unwrap();
    outcome(
        a >= 0.95 && c.acc_overall >= 0.90 && elapsed < Duration::from_secs(300),
        format!(
            "AUC {a:.4}, ACC {:.4} over {} genuine + {} swap frames, {} skipped, world fitted in {elapsed:.2?}",
            c.acc_overall,
            g.len(),
            f.len(),
            fits.skipped
        ),
    )
}

/// Independent scan: every candidate is scored with `evaluate` and the
/// selection rule is applied directly.
fn exhaustive_scan(g: &[f64], f: &[f64]) -> (f64, f64, f64) {
    let mut all: Vec<f64> = g.iter().chain(f).copied().collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all.dedup();
    let mut candidates = Vec::new();
    if all[0] > 0.0 {
        candidates.push(all[0] / 2.0);
    }
    for i in 1..all.len() {
        candidates.push(all[i - 1] + (all[i] - all[i - 1]) / 2.0);
    }
    candidates.push(all[all.len() - 1] + 1.0);
    let mut best: Option<(f64, f64, f64, f64)> = None;
    for t in candidates {
        let a = evaluate(t, g, f).unwrap();
        let gap = (a.acc_genuine - a.acc_fake).abs();
        let better = match best {
            None => true,
            Some((bg, bo, bt, _)) => {
                gap < bg - 1e-15 || ((gap - bg).abs() <= 1e-15 && (a.acc_overall > bo + 1e-15 || ((a.acc_overall - bo).abs() <= 1e-15 && t < bt)))
            }
        };
        if better {
            best = Some((gap, a.acc_overall, t, a.acc_genuine));
        }
    }
    let (_, overall, t, acc_g) = best.unwrap();
    (t, acc_g, overall)
}

fn calibration(fits: &WorldFits) -> Outcome {
    let (g, f) = scores_of(fits, Metric::Mahalanobis);
    let c = calibrate_threshold(&g, &f).unwrap();
    let (t, acc_g, overall) = exhaustive_scan(&g, &f);
    let gap = (c.acc_genuine - c.acc_fake).abs();
    let matches = c.threshold == t && c.acc_genuine == acc_g && c.acc_overall == overall;
    outcome(
        gap <= 0.02 && matches,
        format!("gap {gap:.4} at tau {:.6}; exhaustive scan {}", c.threshold, if matches { "agrees" } else { "disagrees" }),
    )
}

fn fmt_accs(accs: &[f64]) -> String {
    accs.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(", ")
}

fn laundering_trend(basis: &ShapeBasis, base: &WorldFits, opts: &ExperimentOptions) -> Outcome {
    let rows = run_ladder(basis, base, &laundering_ladder(&base.config), &[Metric::Mahalanobis], 20, opts).unwrap();
    let accs: Vec<f64> = rows.iter().map(|r| r.acc).collect();
    let monotone = accs.windows(2).all(|w| w[1] <= w[0] + 0.02);
    let last = *accs.last().unwrap();
    outcome(
        monotone && last >= 0.5,
        format!("ACC at sigma 0.5/1/2/4/8 px: {}", fmt_accs(&accs)),
    )
}

fn ladder_gaps(basis: &ShapeBasis, config: &WorldConfig, opts: &ExperimentOptions) -> (Vec<f64>, Vec<f64>) {
    let fits = fit_world(basis, config, &opts.fit).unwrap();
    let rows = run_ladder(basis, &fits, &laundering_ladder(config), &[Metric::Mahalanobis, Metric::Cosine], 20, opts).unwrap();
    let m: Vec<f64> = rows.iter().filter(|r| r.metric == Metric::Mahalanobis).map(|r| r.acc).collect();
    let c: Vec<f64> = rows.iter().filter(|r| r.metric == Metric::Cosine).map(|r| r.acc).collect();
    (m, c)
}

fn metric_ablation(basis: &ShapeBasis, opts: &ExperimentOptions) -> Outcome {
    let base = WorldConfig::default();
    let (am, ac) = ladder_gaps(basis, &anisotropy_scenario(basis, &base, DEFAULT_ANISOTROPY), opts);
    let (im, ic) = ladder_gaps(basis, &isotropic_control(basis, &base, DEFAULT_ANISOTROPY), opts);
    let aniso_gap: Vec<f64> = am.iter().zip(&ac).map(|(m, c)| m - c).collect();
    let iso_gap: Vec<f64> = im.iter().zip(&ic).map(|(m, c)| m - c).collect();
    let mean_abs = |v: &[f64]| v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64;
    let m_wins = aniso_gap.iter().all(|&g| g >= 0.0);
    let shrinks = mean_abs(&iso_gap) < mean_abs(&aniso_gap);
    outcome(
        m_wins && shrinks,
        format!(
            "anisotropic M {} | C {}; isotropic M {} | C {}; mean |M-C| {:.4} -> {:.4}",
            fmt_accs(&am),
            fmt_accs(&ac),
            fmt_accs(&im),
            fmt_accs(&ic),
            mean_abs(&aniso_gap),
            mean_abs(&iso_gap)
        ),
    )
}

fn ablate_k_harness() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let exe = env!("CARGO_BIN_EXE_faceshape");
    let ok = Command::new(exe)
        .args(["basis", "--out", &p("basis.json"), "--kid", "100", "--kexp", "10", "--seed", "7"])
        .status()
        .unwrap()
        .success();
    if !ok {
        return outcome(false, "basis command failed");
    }
    let out = Command::new(exe)
        .args(["simulate", "--basis", &p("basis.json"), "--subjects", "10", "--seed", "3", "--out", &p("world")])
        .args(["--ablate-k", "20,40,60,80,100"])
        .output()
        .unwrap();
    if !out.status.success() {
        return outcome(false, format!("simulate failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(Path::new(&p("world")).join("metrics.json")).unwrap()).unwrap();
    let rows = doc["ablate_k"].as_array().cloned().unwrap_or_default();
    let ks: Vec<u64> = rows.iter().filter_map(|r| r["k"].as_u64()).collect();
    let accs: Vec<String> = rows.iter().map(|r| r["acc"].to_string()).collect();
    let shared = doc["config"]["seed"] == 3 && rows.iter().all(|r| r["n_genuine"] == rows[0]["n_genuine"]);
    outcome(
        ks == [20, 40, 60, 80, 100] && accs.len() == 5 && shared,
        format!(
            "k = {ks:?}, ACC = {}",
            accs.iter().map(|a| a.parse::<f64>().map(|v| format!("{v:.4}")).unwrap_or_default()).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn constraint_enforcement() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let feats: Vec<ShapeFeature> = (0..19).map(|_| ShapeFeature::new(gaussian(&mut rng, 20)).unwrap()).collect();
    let short = enroll(&feats, "s", "b", &EnrollOptions { min_frames: 1, shrinkage: Shrinkage::Auto });
    let short_ok = matches!(short, Err(Error::TooFewFrames { frames: 19, k: 20 }));

    let dir = tempfile::tempdir().unwrap();
    let good = random_template(&mut rng);
    let path = dir.path().join("t.json");
    good.save(&path).unwrap();
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let k = good.k();
    let tamper = |edit: &dyn Fn(&mut Value)| {
        let mut d = doc.clone();
        edit(&mut d);
        let p = dir.path().join("bad.json");
        std::fs::write(&p, serde_json::to_string(&d).unwrap()).unwrap();
        Template::load(&p).is_err()
    };
    let asym = tamper(&|d| d["covariance"][1] = serde_json::json!(1e3));
    let indefinite = tamper(&|d| {
        for i in 0..k {
            d["covariance"][i * k + i] = serde_json::json!(-1.0);
        }
    });
    let few = tamper(&|d| d["n"] = serde_json::json!(k - 1));
    let round_trip = Template::load(&path).map(|t| t == good).unwrap_or(false);
    outcome(
        short_ok && asym && indefinite && few && round_trip,
        format!("n<k enroll rejected: {short_ok}; load rejects asymmetric {asym}, indefinite {indefinite}, n<k {few}"),
    )
}

fn histogram_clipping() -> Outcome {
    let threshold = 120.0;
    let distances = [5.0, 150.0, 99.0, 250.0, 100.0];
    let verdicts: Vec<Verdict> = distances
        .iter()
        .enumerate()
        .map(|(i, &d)| Verdict {
            distance: d,
            threshold,
            label: Label::from_distance(d, threshold),
            frame_index: i,
            fit_residual_rms: 0.0,
        })
        .collect();
    let video = aggregate("s", verdicts.clone(), Vec::new(), threshold, Aggregation::Majority).unwrap();
    let report = VerificationReport::from(&video);
    let shown: Vec<f64> = report.frames.iter().map(|f| f.display_distance).collect();
    let clipped = shown == [5.0, 100.0, 99.0, 100.0, 100.0];
    let labels_kept = report.frames.iter().zip(&verdicts).all(|(f, v)| f.label == v.label && f.distance == v.distance);
    let fake_kept = report.frames[1].label == Label::Fake;
    outcome(
        clipped && labels_kept && fake_kept && DISPLAY_CAP == 100.0,
        format!("displayed {shown:?}; labels unchanged: {}", labels_kept && fake_kept),
    )
}

fn main() {
    let started = Instant::now();
    let basis = synthesize_basis(68, 40, 10, 1).unwrap();
    let opts = ExperimentOptions::default();
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut record = |name: &'static str, o: Outcome| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };

    record("mahalanobis-oracle-equivalence", mahalanobis_oracle());
    record("center-identity", center_identity());
    record("fit-recovery", fit_recovery(&basis));
    record("fitting-invariances", fitting_invariances(&basis));

    let t = Instant::now();
    let world = fit_world(&basis, &WorldConfig::default(), &opts.fit).unwrap();
    let world_time = t.elapsed();
    record("separation", separation(&world, world_time));
    record("calibration-criterion", calibration(&world));
    record("laundering-trend", laundering_trend(&basis, &world, &opts));
    record("metric-ablation", metric_ablation(&basis, &opts));
    record("feature-dimension-ablation-harness", ablate_k_harness());
    record("constraint-enforcement", constraint_enforcement());
    record("histogram-clipping", histogram_clipping());

    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    println!("{} of {} criteria passed in {:.1?}", results.len() - failed, results.len(), started.elapsed());
    if failed > 0 {
        std::process::exit(1);
    }
}
