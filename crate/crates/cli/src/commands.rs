use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use continuum_dropout::data::{gen_gaussian_blobs, gen_two_spirals, Split};
use continuum_dropout::infercalib::{
    ece, mc_sweep as sweep, median, predict_logits, reliability_bins, write_commented_csv, write_reliability_csv,
    write_sweep_csv,
};
use continuum_dropout::model::{DropoutMode, ModelParams};
use continuum_dropout::netcore::{softmax, Checkpoint};
use continuum_dropout::renewal::{
    approx_rates, dropout_rate, expected_renewals, forward_residuals, mc_estimate_availability, mc_estimate_renewals,
    solve_rates,
};
use continuum_dropout::stream::stream;
use continuum_dropout::train::{evaluate as eval_split, train_loop};
use continuum_dropout::{DropoutSpec, RenewalRates};
use serde_json::{json, Value};

use crate::config::{DataSource, Loaded};
use crate::CliError;

const CHECKPOINT_STEM: &str = "checkpoint";
const AVAILABILITY_SE_GATE: f64 = 4.0;
const RENEWAL_REL_GATE: f64 = 0.01;
const POWERED_SAMPLES: usize = 10_000;
const GRID_P: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
const GRID_M: [f64; 4] = [5.0, 10.0, 50.0, 100.0];

fn print_json(v: &Value) {
    // a closed pipe downstream is not an error for a report printer
    let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(v).expect("json value"));
}

fn write_json(path: &Path, v: &Value) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(v).expect("json value") + "\n")?;
    Ok(())
}

fn rates_json(rates: &RenewalRates, spec: &DropoutSpec) -> Value {
    let (dp, dm) = forward_residuals(rates, spec);
    json!({
        "lambda1": rates.lambda1,
        "lambda2": rates.lambda2,
        "p_residual": dp,
        "m_residual": dm,
    })
}

pub fn solve_lambdas(p: f64, m: f64, horizon: f64, approx: bool) -> Result<(), CliError> {
    let spec = DropoutSpec::new(p, m, horizon).map_err(CliError::config)?;
    let approx_rates = approx_rates(&spec);
    let exact = match solve_rates(&spec) {
        Ok(r) => Some(r),
        Err(e) if approx => {
            log::warn!("exact solve failed: {e}");
            None
        }
        Err(e) => return Err(e.into()),
    };
    let selected = if approx { approx_rates } else { exact.expect("exact solve succeeded") };
    let mut out = rates_json(&selected, &spec);
    let obj = out.as_object_mut().expect("object");
    obj.insert("p".into(), json!(p));
    obj.insert("m".into(), json!(m));
    obj.insert("T".into(), json!(horizon));
    obj.insert("method".into(), json!(if approx { "approx" } else { "exact" }));
    obj.insert("exact".into(), exact.map_or(Value::Null, |r| rates_json(&r, &spec)));
    obj.insert("approx".into(), rates_json(&approx_rates, &spec));
    print_json(&out);
    Ok(())
}

pub fn verify_renewal(p: f64, m: f64, horizon: f64, samples: usize, seed: u64) -> Result<(), CliError> {
    let spec = DropoutSpec::new(p, m, horizon).map_err(CliError::config)?;
    if samples < POWERED_SAMPLES {
        eprintln!("warning: {samples} samples leave the gates underpowered (use at least {POWERED_SAMPLES})");
    }
    let rates = solve_rates(&spec)?;
    let avail = mc_estimate_availability(&rates, horizon, samples, &mut stream(seed, 0)).map_err(CliError::config)?;
    let renew = mc_estimate_renewals(&rates, horizon, samples, &mut stream(seed, 1)).map_err(CliError::config)?;
    let p_closed = dropout_rate(&rates, horizon);
    let m_closed = expected_renewals(&rates, horizon);
    let inactive = 1.0 - avail.value;
    let se = avail.std_error;
    let availability_pass = (inactive - p_closed).abs() <= AVAILABILITY_SE_GATE * se;
    let rel = (renew.value - m_closed).abs() / m_closed;
    let renewals_pass = rel <= RENEWAL_REL_GATE;
    print_json(&json!({
        "p": p, "m": m, "T": horizon, "samples": samples, "seed": seed,
        "lambda1": rates.lambda1, "lambda2": rates.lambda2,
        "availability": {
            "closed_form_inactive": p_closed,
            "mc_inactive": inactive,
            "std_error": se,
            "z": if se > 0.0 { (inactive - p_closed) / se } else { 0.0 },
            "gate_se": AVAILABILITY_SE_GATE,
            "pass": availability_pass,
        },
        "renewals": {
            "closed_form": m_closed,
            "mc_mean": renew.value,
            "std_error": renew.std_error,
            "relative_error": rel,
            "gate_relative": RENEWAL_REL_GATE,
            "pass": renewals_pass,
        },
    }));
    if availability_pass && renewals_pass {
        Ok(())
    } else {
        Err(CliError::runtime("renewal verification gate failed"))
    }
}

fn checkpoint_location(loaded: &Loaded, arg: Option<&Path>) -> (PathBuf, String) {
    let path = match arg {
        Some(p) => match p.extension().and_then(|e| e.to_str()) {
            Some("txt" | "bin") => p.with_extension(""),
            _ => p.to_path_buf(),
        },
        None => loaded.output_dir().join(CHECKPOINT_STEM),
    };
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let stem = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| CHECKPOINT_STEM.to_string());
    (dir, stem)
}

fn load_params(loaded: &Loaded, arg: Option<&Path>) -> Result<ModelParams, CliError> {
    let (dir, stem) = checkpoint_location(loaded, arg);
    let ckpt = Checkpoint::read(&dir, &stem)
        .map_err(|e| CliError::runtime(format!("cannot read checkpoint {}/{stem}: {e}", dir.display())))?;
    Ok(loaded.model.from_checkpoint(&ckpt)?)
}

fn prepare_output(loaded: &Loaded) -> Result<PathBuf, CliError> {
    let dir = loaded.output_dir();
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn metrics_json(m: &continuum_dropout::train::Metrics) -> Value {
    json!({"accuracy": m.accuracy, "mean_loss": m.mean_loss, "n": m.n})
}

pub fn train(config: &Path) -> Result<(), CliError> {
    let loaded = Loaded::from_path(config)?;
    let ds = loaded.dataset()?;
    let out = prepare_output(&loaded)?;
    let outcome = train_loop(&loaded.model, &loaded.config.training, &ds)?;

    let mut ckpt = loaded.model.to_checkpoint(&outcome.params)?;
    ckpt.descriptor.insert("config_hash".into(), loaded.hash.clone());
    ckpt.descriptor.insert("dropout".into(), loaded.config.model.dropout.name().into());
    if let Some(r) = loaded.model.rates() {
        ckpt.descriptor.insert("lambda1".into(), r.lambda1.to_string());
        ckpt.descriptor.insert("lambda2".into(), r.lambda2.to_string());
    }
    ckpt.write(&out, CHECKPOINT_STEM)?;
    outcome.history.write_csv(&out.join("history.csv"), &loaded.provenance())?;

    let inf = &loaded.config.inference;
    let val = eval_split(&loaded.model, &outcome.params, &ds.nonempty_samples(Split::Val)?, inf.n_mc, inf.seeds[0])?;
    let test = eval_split(&loaded.model, &outcome.params, &ds.nonempty_samples(Split::Test)?, inf.n_mc, inf.seeds[0])?;
    let best = outcome.history.best();
    let summary = json!({
        "provenance": loaded.provenance_json(),
        "epochs_run": outcome.history.records.len(),
        "best_epoch": best.map(|r| r.epoch),
        "best_val_loss": best.map(|r| r.val_loss),
        "val": metrics_json(&val),
        "test": metrics_json(&test),
        "n_mc": inf.n_mc,
    });
    write_json(&out.join("metrics.json"), &summary)?;
    print_json(&summary);
    Ok(())
}

pub fn evaluate(config: &Path, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let loaded = Loaded::from_path(config)?;
    let params = load_params(&loaded, checkpoint)?;
    let ds = loaded.dataset()?;
    let out = prepare_output(&loaded)?;
    let inf = &loaded.config.inference;
    let test = eval_split(&loaded.model, &params, &ds.nonempty_samples(Split::Test)?, inf.n_mc, inf.seeds[0])?;
    let summary = json!({
        "provenance": loaded.provenance_json(),
        "test": metrics_json(&test),
        "n_mc": inf.n_mc,
    });
    write_json(&out.join("evaluation.json"), &summary)?;
    print_json(&summary);
    Ok(())
}

pub fn calibrate(config: &Path, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let loaded = Loaded::from_path(config)?;
    let params = load_params(&loaded, checkpoint)?;
    let ds = loaded.dataset()?;
    let out = prepare_output(&loaded)?;
    let inf = &loaded.config.inference;
    let test = ds.nonempty_samples(Split::Test)?;
    let logits = predict_logits(&loaded.model, &params, &test, inf.n_mc, inf.seeds[0])?;
    let probs: Vec<Vec<f64>> = logits.iter().map(|l| softmax(l)).collect();
    let bins = reliability_bins(&probs, &test.labels)?;
    let report = ece(&bins)?;
    write_reliability_csv(&bins, &out.join("reliability.csv"), &loaded.provenance())?;
    let summary = json!({
        "provenance": loaded.provenance_json(),
        "ece": report.ece,
        "total": report.total,
        "bins": bins.bins,
        "n_mc": inf.n_mc,
    });
    write_json(&out.join("calibration.json"), &summary)?;
    print_json(&summary);
    Ok(())
}

pub fn mc_sweep(config: &Path, checkpoint: Option<&Path>, n_mc: &[usize]) -> Result<(), CliError> {
    let loaded = Loaded::from_path(config)?;
    if !loaded.model.is_continuum() {
        return Err(CliError::config("mc-sweep needs a continuum dropout model"));
    }
    if n_mc.contains(&0) {
        return Err(CliError::config("--nmc entries must be >= 1"));
    }
    let params = load_params(&loaded, checkpoint)?;
    let ds = loaded.dataset()?;
    let out = prepare_output(&loaded)?;
    let test = ds.nonempty_samples(Split::Test)?;
    let rows = sweep(&loaded.model, &params, &test, n_mc, &loaded.config.inference.seeds)?;
    write_sweep_csv(&rows, &out.join("sweep.csv"), &loaded.provenance())?;
    print_json(&json!({"provenance": loaded.provenance_json(), "rows": rows}));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn gen_data(
    generator: &str,
    out: &Path,
    n_per_class: usize,
    noise_std: f64,
    seed: u64,
    k: usize,
    d_x: usize,
    separation: f64,
) -> Result<(), CliError> {
    let ds = match generator {
        "two_spirals" => gen_two_spirals(n_per_class, noise_std, seed),
        _ => gen_gaussian_blobs(k, d_x, separation, noise_std, n_per_class, seed),
    }
    .map_err(CliError::config)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    ds.write_csv(out)?;
    eprintln!("wrote {} rows to {}", ds.len(), out.display());
    Ok(())
}

fn reseeded(loaded: &Loaded, dropout: DropoutMode, seed: u64) -> Result<Loaded, CliError> {
    let mut c = loaded.config.clone();
    c.model.dropout = dropout;
    c.training.seed = c.training.seed.wrapping_add(seed);
    c.split.seed = c.split.seed.wrapping_add(seed);
    match &mut c.data {
        DataSource::TwoSpirals { seed: s, .. } | DataSource::GaussianBlobs { seed: s, .. } => {
            *s = s.wrapping_add(seed)
        }
        DataSource::Csv { .. } => {}
    }
    Loaded::new(c, loaded.base_dir.clone())
}

fn mode_params(mode: &DropoutMode) -> (String, String) {
    match *mode {
        DropoutMode::None => (String::new(), String::new()),
        DropoutMode::NaiveDrift { p } => (p.to_string(), String::new()),
        DropoutMode::Continuum { p, m } => (p.to_string(), m.to_string()),
    }
}

pub fn compare(
    config: &Path,
    seeds: u64,
    p: Option<f64>,
    m: Option<f64>,
    naive_p: Option<f64>,
    grid: bool,
) -> Result<(), CliError> {
    let loaded = Loaded::from_path(config)?;
    if seeds == 0 {
        return Err(CliError::config("--seeds must be >= 1"));
    }
    let (cfg_p, cfg_m) = match loaded.config.model.dropout {
        DropoutMode::Continuum { p, m } => (Some(p), Some(m)),
        DropoutMode::NaiveDrift { p } => (Some(p), None),
        DropoutMode::None => (None, None),
    };
    let p = p.or(cfg_p).unwrap_or(0.3);
    let m = m.or(cfg_m).unwrap_or(10.0);
    let mut modes = vec![
        DropoutMode::None,
        DropoutMode::NaiveDrift { p: naive_p.unwrap_or(p) },
        DropoutMode::Continuum { p, m },
    ];
    if grid {
        for gp in GRID_P {
            for gm in GRID_M {
                if (gp, gm) != (p, m) {
                    modes.push(DropoutMode::Continuum { p: gp, m: gm });
                }
            }
        }
    }
    let out = loaded.output_dir().join("compare");
    fs::create_dir_all(&out)?;
    let inf = &loaded.config.inference;
    let mut runs = Vec::new();
    let mut summary = Vec::new();
    for mode in &modes {
        let (mp, mm) = mode_params(mode);
        let (mut tests, mut gaps) = (Vec::new(), Vec::new());
        for s in 0..seeds {
            let run = reseeded(&loaded, *mode, s)?;
            let ds = run.dataset()?;
            let outcome = train_loop(&run.model, &run.config.training, &ds)?;
            let tr = eval_split(&run.model, &outcome.params, &ds.nonempty_samples(Split::Train)?, inf.n_mc, inf.seeds[0])?;
            let te = eval_split(&run.model, &outcome.params, &ds.nonempty_samples(Split::Test)?, inf.n_mc, inf.seeds[0])?;
            let gap = tr.accuracy - te.accuracy;
            runs.push(vec![
                mode.name().to_string(),
                mp.clone(),
                mm.clone(),
                s.to_string(),
                tr.accuracy.to_string(),
                te.accuracy.to_string(),
                gap.to_string(),
            ]);
            tests.push(te.accuracy);
            gaps.push(gap);
            log::info!("{} seed {s}: test {:.4} gap {:.4}", mode.name(), te.accuracy, gap);
        }
        summary.push(vec![
            mode.name().to_string(),
            mp,
            mm,
            median(&tests).to_string(),
            median(&gaps).to_string(),
            seeds.to_string(),
        ]);
    }
    let prov = loaded.provenance();
    write_commented_csv(
        &out.join("compare_runs.csv"),
        &prov,
        &["mode", "p", "m", "seed", "train_acc", "test_acc", "gap"],
        &runs,
    )?;
    write_commented_csv(
        &out.join("compare_summary.csv"),
        &prov,
        &["mode", "p", "m", "median_test_acc", "median_gap", "n_seeds"],
        &summary,
    )?;
    let rows: Vec<Value> = summary
        .iter()
        .map(|r| json!({"mode": r[0], "p": r[1], "m": r[2], "median_test_acc": r[3], "median_gap": r[4]}))
        .collect();
    print_json(&json!({"provenance": loaded.provenance_json(), "summary": rows}));
    Ok(())
}
