//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Synthesises the two corpora (cached between runs) and trains at desk scale.
//! `S2C_ACCEPT_DATA` moves the data directory, `S2C_ACCEPT_ONLY=1,5,7` runs a
//! subset, and `S2C_ACCEPT_STRICT=1` turns any failure into a non-zero exit.

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s2c::evalkit::experiments::{group_accuracies, verification_scores, RunSpec, GROUP};
use s2c::evalkit::{stats, ExperimentConfig, IntervalEstimate, Profile, ReportBundle, Runner};
use s2c::frontend::{FrontendParams, Mode};
use s2c::model::{BackboneSpec, ModelConfig, PredictionBatch, S2CModel};
use s2c::synth::{generate_corpus, CorpusSpec};
use s2c::trainer::{loss_components, reduced_grad_check, Labels, TrainConfig, Terms};
use s2c::verifier::{compute_threshold, roc_curve, threshold_lower_bound};
use s2c::Result;
use std::path::PathBuf;
use std::time::Instant;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

struct Ctx {
    runner: Runner,
    data: PathBuf,
}

fn c1(cx: &Ctx) -> Result<Verdict> {
    let b = cx.runner.base()?;
    let (kw, spk) = (b.report.keyword_acc().unwrap_or(0.0), b.report.speaker_acc().unwrap_or(0.0));
    let h = &b.trained.history;
    let epochs = h.records.len();
    verdict(
        kw >= 0.90 && spk >= 0.90 && epochs <= 20 && h.wall_seconds <= 900.0,
        format!("keyword {kw:.3}, speaker {spk:.3} (≥ 0.90); {epochs} epochs (≤ 20); {:.0}s training (≤ 900s)", h.wall_seconds),
    )
}

fn c2(cx: &Ctx) -> Result<Verdict> {
    let base = cx.runner.base()?;
    let spec = RunSpec {
        plan: s2c::dataset::SamplePlan::from_counts(&GROUP, &[30, 0, 0, 0, 0])?,
        extra_test: GROUP.to_vec(),
        ..RunSpec::base()
    };
    let single = cx.runner.train_inspection(&spec, cx.runner.cfg.seed)?;
    let own = single.report.subject_keyword_acc(1).unwrap_or(0.0);
    let others = |r: &s2c::evalkit::EvalReport| stats::mean(&GROUP[1..].iter().map(|&s| r.subject_keyword_acc(s).unwrap_or(0.0)).collect::<Vec<_>>());
    let (so, po) = (others(&single.report), others(&base.report));
    verdict(
        own >= 0.90 && po - so >= 0.15,
        format!("subject-1 model: own {own:.3} (≥ 0.90), others {so:.3} vs pooled {po:.3}, gap {:.3} (≥ 0.15)", po - so),
    )
}

fn c3(cx: &Ctx) -> Result<Verdict> {
    let base = cx.runner.base()?;
    let a = cx.runner.adapt_base(6, 5)?;
    let new = a.report.subject_keyword_acc(6).unwrap_or(0.0);
    let drops: Vec<f64> = GROUP
        .iter()
        .map(|&s| base.report.subject_keyword_acc(s).unwrap_or(0.0) - a.report.subject_keyword_acc(s).unwrap_or(0.0))
        .collect();
    let worst = drops.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    verdict(
        new >= 0.90 && worst <= 0.03,
        format!(
            "subject 6 at 5 shots: {new:.3} (≥ 0.90, base {:.3}); largest existing-subject drop {worst:.3} (≤ 0.03)",
            base.report.subject_keyword_acc(6).unwrap_or(0.0)
        ),
    )
}

fn c4(cx: &Ctx) -> Result<Verdict> {
    let b = cx.runner.base()?;
    let v = b.report.verification.as_ref().expect("base model has a threshold");
    let c = v.confusion();
    verdict(
        v.success_rate() >= 0.88 && v.detection_rate() >= 0.65,
        format!(
            "λ {:.3}; authorized {}/{} = {:.3} (≥ 0.88), unauthorized {}/{} = {:.3} (≥ 0.65)",
            v.lambda,
            c[0][0],
            v.authorized_total,
            v.success_rate(),
            c[1][1],
            v.unauthorized_total,
            v.detection_rate()
        ),
    )
}

fn c5(_: &Ctx) -> Result<Verdict> {
    let mut worst_bound = 0f64;
    for m in 2..=100usize {
        let mf = m as f64;
        let lb = threshold_lower_bound(m)?;
        worst_bound = worst_bound.max(((lb - (mf + 1.0 + 1.0 / (mf - 1.0))) / lb).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut below = 0;
    for _ in 0..10_000 {
        let m = rng.random_range(2..=100usize);
        let k = rng.random_range(1..=8usize);
        let sharp = rng.random_range(0.1..20.0f64);
        let p = Array2::from_shape_fn((k, m), |_| rng.random::<f64>().powf(sharp) + 1e-12);
        let p = &p / &p.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1));
        if compute_threshold(p.view())? < threshold_lower_bound(m)? * (1.0 - 1e-12) {
            below += 1;
        }
    }
    let mut worst_onehot = 0f64;
    for m in 2..=100usize {
        let p = Array2::from_shape_fn((m, m), |(i, j)| if (i + 1) % m == j { 1.0 } else { 0.0 });
        let lb = threshold_lower_bound(m)?;
        worst_onehot = worst_onehot.max((compute_threshold(p.view())? - lb).abs() / lb);
    }
    verdict(
        worst_bound <= 1e-15 && below == 0 && worst_onehot <= 1e-12,
        format!("bound rel. error {worst_bound:.1e}; {below}/10000 random sets below bound; one-hot rel. error {worst_onehot:.1e}"),
    )
}

fn c6(cx: &Ctx) -> Result<Verdict> {
    let g = cx.runner.growth(5)?;
    let test = cx.runner.digit_test()?;
    let mut ok = true;
    let mut parts = Vec::new();
    for size in [15, 30] {
        let step = g.at(size).expect("growth reached size");
        let ids = step.model.roster.ids();
        let scoped = test.filter(|s, _| ids.contains(&s) || g.unauthorized.contains(&s));
        let enroll = cx.runner.growth_enrollment(&step.model, g.shots)?;
        let sc = verification_scores(&step.model, &enroll, &scoped)?;
        let (r, d) = (roc_curve(&sc.ratio)?.auc, roc_curve(&sc.dvector)?.auc);
        ok &= r >= 0.80 && r - d >= 0.15;
        parts.push(format!("size {size}: ratio AUC {r:.4} vs d-vector {d:.4} (margin {:.3})", r - d));
    }
    verdict(ok, format!("{} (ratio ≥ 0.80, margin ≥ 0.15)", parts.join("; ")))
}

fn c7(_: &Ctx) -> Result<Verdict> {
    let gc = (0..3).map(|s| reduced_grad_check(Terms::ALL, s)).collect::<Result<Vec<_>>>()?;
    let gmax = gc.iter().copied().fold(0.0, f64::max);

    let cfg = ModelConfig::new(BackboneSpec::desk("small")?, 28);
    let kws: Vec<String> = (0..10).map(|k| format!("k{k}")).collect();
    let model = S2CModel::new(cfg, &[1, 2, 3, 4, 5], kws, Mode::Mel, FrontendParams::default().with_image_size(28), 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Array4::from_shape_fn((24, 3, 28, 28), |_| rng.random_range(-3.0f32..3.0));
    let preds = model.predict_features(model.extract_features(&x)?)?;
    let sum_err = [&preds.s, &preds.w, &preds.sw, &preds.ws]
        .iter()
        .flat_map(|p| p.rows().into_iter().map(|r| (r.sum() - 1.0).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max);

    let labels = Labels { subjects: (0..24).map(|i| i % 5).collect(), keywords: (0..24).map(|i| i % 10).collect() };
    let b = loss_components(&preds, &labels)?;
    let identity = b.total == b.l_s + b.l_w + b.l_sw + b.l_ws;

    let n = 10;
    let u = PredictionBatch {
        s: Array2::from_elem((1, 5), 0.2),
        w: Array2::from_elem((1, n), 1.0 / n as f64),
        sw: Array2::from_elem((1, n), 1.0 / n as f64),
        ws: Array2::from_elem((1, 5), 0.2),
    };
    let lw = loss_components(&u, &Labels { subjects: vec![0], keywords: vec![3] })?.l_w;
    let lw_err = (lw - (n as f64).ln()).abs();
    verdict(
        gmax < 1e-4 && sum_err <= 1e-6 && identity && lw_err <= 1e-9,
        format!("grad check {gmax:.2e} (< 1e-4); simplex error {sum_err:.1e}; loss identity {identity}; |L_w − ln N| {lw_err:.1e}"),
    )
}

fn ablation_runner(cx: &Ctx) -> Runner {
    let mut cfg = cx.runner.cfg.clone();
    cfg.repeats = 3;
    cfg.profile.train = TrainConfig { stage1_epochs: 5, stage2_epochs: 5, patience: 3, ..cfg.profile.train };
    Runner::new(cfg)
}

fn check_ablation(b: &ReportBundle, name: &str, reference: &str) -> (bool, String) {
    let Some(t) = b.table(name) else { return (false, format!("no `{name}` table")) };
    let rows_ok = t.rows.len() == 3 && t.rows.iter().all(|r| r.iter().skip(1).all(|c| c.contains('±')));
    let kw = |l: &str| b.metrics.get(&format!("{l}.kw")).copied().unwrap_or(f64::NAN);
    let labels: Vec<&str> = t.rows.iter().map(|r| r[0].as_str()).collect();
    let summary = labels.iter().map(|l| format!("{l} {:.3}", kw(l))).collect::<Vec<_>>().join(", ");
    let mut ok = rows_ok;
    let mut note = String::new();
    if !reference.is_empty() {
        let r = kw(reference);
        let width = 2.0 * b.metrics.get(&format!("{reference}.kw_margin")).copied().unwrap_or(0.0);
        let next = labels.iter().filter(|&&l| l != reference).map(|l| kw(l)).fold(f64::INFINITY, f64::min);
        let last_by = next - r;
        ok &= last_by <= width;
        note = format!("; {reference} trails the lowest other by {:.3} (CI width {width:.3})", last_by.max(0.0));
    }
    (ok, format!("{name}: {} rows with CIs, kw {summary}{note}", t.rows.len()))
}

fn c8(cx: &Ctx) -> Result<Verdict> {
    let r = ablation_runner(cx);
    let (a, da) = check_ablation(&r.run(7)?, "frontends", Mode::Mel.label());
    let (b, db) = check_ablation(&r.run(8)?, "backbones", "");
    verdict(a && b, format!("{da}; {db} (3 repeats, 5+5 epochs)"))
}

fn c9(cx: &Ctx) -> Result<Verdict> {
    let g = cx.runner.growth(5)?;
    let per_size: Vec<f64> = g.steps.iter().map(|s| stats::mean(&group_accuracies(&s.report, &g.unauthorized).0)).collect();
    let auth = stats::mean(&per_size);
    let last = g.steps.last().expect("steps");
    let w5 = IntervalEstimate::from_samples(&group_accuracies(&last.report, &g.unauthorized).2)?;
    let (direct, _) = cx.runner.train_digits_direct(last.size as u32, 20)?;
    let test = cx.runner.digit_test()?;
    let ids = direct.model.roster.ids();
    let r20 = s2c::evalkit::evaluate_model(&direct.model, &test.filter(|s, _| ids.contains(&s)), None)?;
    let w20 = IntervalEstimate::from_samples(&group_accuracies(&r20, &[]).2)?;
    verdict(
        g.steps.len() == 26 && auth >= 0.95 && w5.width() > w20.width(),
        format!(
            "{} models; authorized keyword mean {auth:.3} (≥ 0.95, min {:.3}); size-30 speaker accuracy 5-shot {w5} (width {:.3}) vs 20-shot {w20} (width {:.3})",
            g.steps.len(),
            per_size.iter().copied().fold(1.0, f64::min),
            w5.width(),
            w20.width()
        ),
    )
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let data = std::env::var("S2C_ACCEPT_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|_| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-data"));
    let only: Option<Vec<usize>> =
        std::env::var("S2C_ACCEPT_ONLY").ok().map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let strict = std::env::var("S2C_ACCEPT_STRICT").is_ok_and(|v| v == "1");
    let wanted = |i: usize| only.as_ref().is_none_or(|o| o.contains(&i));

    let t0 = Instant::now();
    let setup = || -> Result<Ctx> {
        if (1..=4).chain([8]).any(wanted) {
            generate_corpus(&data.join("inspection"), &CorpusSpec::inspection(7))?;
        }
        if [6, 9].into_iter().any(wanted) {
            generate_corpus(&data.join("digits"), &CorpusSpec::digits((1..=30).chain(51..=60), 7))?;
        }
        let mut cfg = ExperimentConfig::new(Profile::desk());
        cfg.inspection = Some(data.join("inspection"));
        cfg.digits = Some(data.join("digits"));
        cfg.cache_dir = Some(data.join(".features"));
        Ok(Ctx { runner: Runner::new(cfg), data: data.clone() })
    };
    let cx = match setup() {
        Ok(cx) => cx,
        Err(e) => {
            println!("acceptance setup failed: {e}");
            std::process::exit(1);
        }
    };
    println!("acceptance data in {}", cx.data.display());

    type Check = fn(&Ctx) -> Result<Verdict>;
    let checks: [(&str, Check); 9] = [
        ("joint classification quality", c1),
        ("pooling benefit", c2),
        ("few-shot adaptation", c3),
        ("verification rates", c4),
        ("threshold mathematics", c5),
        ("ratio vs d-vector ordering", c6),
        ("numerical core", c7),
        ("ablation harness", c8),
        ("group-scaling harness", c9),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, f)) in checks.iter().enumerate() {
        let id = i + 1;
        if !wanted(id) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let (pass, detail) = match f(&cx) {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!("C{id} {} {name}: {detail} [{:.0}s]", if pass { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64());
    }
    println!("acceptance: {}/{ran} criteria passed in {:.0}s", ran - failed, t0.elapsed().as_secs_f64());
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
