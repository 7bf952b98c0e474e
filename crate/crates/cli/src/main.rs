use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use fhmm_core::decode::{
    decode_weights, emission_scores, forecast_horizons, reclassify, viterbi_from_scores, DecodeConfig, Reclassify,
    ReclassifyContext, StatePath, Weighting,
};
use fhmm_core::evaluation::{class_scores, f1_scores, roc_auc, to_three_class, Class, ConfusionMatrix};
use fhmm_core::fixtures;
use fhmm_core::gridsearch::{grid_search, GridAxis};
use fhmm_core::inference::{forward_from_log_emissions, posteriors_from_log_emissions, Tensor};
use fhmm_core::io::{
    detect_inflation, hourly_timestamps, load_csv, write_atomic, write_csv, write_dataset, Dataset, LoadOptions,
    ModelFile, DEFAULT_MAX_GAP, DEFAULT_WIND_FLOOR,
};
use fhmm_core::learning::{
    em_fit, kmeans_init, supervised_fit, ClassPriors, EmConfig, InflationSpec, KmeansConfig, SupervisedConfig,
};
use fhmm_core::mi::{mi_state_conditional, StateMi, DEFAULT_K};
use fhmm_core::sample::sample_sequence;
use fhmm_core::variant::Variant;
use fhmm_core::{FhmmError, FhmmModel, HiddenState, NUM_STATES};

#[derive(Parser)]
#[command(name = "fhmm", version, about = "Haze and dust classification with a two-chain factorial HMM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model from an observation CSV.
    Train(TrainArgs),
    /// Most likely state path for each row.
    Decode(DecodeArgs),
    /// Score decoded classes against the labels in the input.
    Evaluate(EvaluateArgs),
    /// State probabilities h steps past the end of the input.
    Forecast(ForecastArgs),
    /// Draw a labeled sequence from a model.
    Simulate(SimulateArgs),
    /// Scan the weight scale and the global weight.
    Gridsearch(GridArgs),
    /// Per-state mutual information of each feature.
    MiReport(MiArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Replacement for zero wind speeds.
    #[arg(long, default_value_t = DEFAULT_WIND_FLOOR)]
    wind_floor: f64,
    /// Longest run of missing values filled by interpolation.
    #[arg(long, default_value_t = DEFAULT_MAX_GAP)]
    max_gap: usize,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum TrainMode {
    Supervised,
    Em,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_parser = parse_variant)]
    variant: Variant,
    #[arg(long, value_enum, default_value = "supervised")]
    mode: TrainMode,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Neighbours for the MI estimate stored with weighted variants.
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[command(flatten)]
    ingest: IngestArgs,
}

#[derive(Args)]
struct DecodeOverrides {
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    v: Option<f64>,
    /// merge_to_clear, humidity_wind_rule or none.
    #[arg(long, value_parser = parse_reclassify)]
    reclassify: Option<Reclassify>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: DecodeOverrides,
    #[command(flatten)]
    ingest: IngestArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: DecodeOverrides,
    #[command(flatten)]
    ingest: IngestArgs,
}

#[derive(Args)]
struct ForecastArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    horizon: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: DecodeOverrides,
    #[command(flatten)]
    ingest: IngestArgs,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    length: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "0.7:2.2:5")]
    omega_range: GridAxis,
    #[arg(long, default_value = "0.7:22:5")]
    v_range: GridAxis,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_reclassify)]
    reclassify: Option<Reclassify>,
    #[command(flatten)]
    ingest: IngestArgs,
}

#[derive(Args)]
struct MiArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    ingest: IngestArgs,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: FhmmError| e.to_string())
}

fn parse_reclassify(s: &str) -> Result<Reclassify, String> {
    s.parse().map_err(|e: FhmmError| e.to_string())
}

fn user(msg: impl Into<String>) -> anyhow::Error {
    FhmmError::InvalidInput(msg.into()).into()
}

fn load(path: &Path, features: Vec<String>, ingest: &IngestArgs) -> Result<Dataset> {
    let opts = LoadOptions {
        features,
        wind_floor: ingest.wind_floor,
        max_gap: ingest.max_gap,
    };
    let (ds, report) = load_csv(path, &opts).with_context(|| format!("loading {}", path.display()))?;
    if report.imputed > 0 || report.dropped > 0 || report.wind_floored > 0 {
        log::info!(
            "{}: {} rows in, {} kept, {} cells imputed, {} rows dropped, {} wind values floored",
            path.display(),
            report.input_rows,
            report.output_rows,
            report.imputed,
            report.dropped,
            report.wind_floored
        );
    }
    if ds.is_empty() {
        return Err(user(format!("{} has no usable rows", path.display())));
    }
    Ok(ds)
}

fn load_model(path: &Path) -> Result<ModelFile> {
    ModelFile::load(path).with_context(|| format!("loading model {}", path.display()))
}

/// Variant settings with command-line overrides. Files without a variant
/// decode unweighted.
fn decode_config(file: &ModelFile, o: &DecodeOverrides) -> Result<DecodeConfig> {
    let mut cfg = match file.variant {
        Some(v) => v.decode_config(o.omega, o.v),
        None => DecodeConfig {
            omega: o.omega.unwrap_or(1.0),
            v: o.v.unwrap_or(1.0),
            reclassify: Reclassify::HumidityWindRule,
            ..Default::default()
        },
    };
    if let Some(r) = o.reclassify {
        cfg.reclassify = r;
    }
    cfg.validate()?;
    if cfg.weighting != Weighting::None && file.mi_profile.is_none() {
        return Err(user("weighted variant but the model file has no MI table; retrain it"));
    }
    Ok(cfg)
}

fn reclassify_context(model: &FhmmModel, rule: Reclassify) -> Result<Option<ReclassifyContext>> {
    Ok(match rule {
        Reclassify::HumidityWindRule => Some(ReclassifyContext::from_model(model)?),
        _ => None,
    })
}

struct Decoded {
    raw: StatePath,
    path: StatePath,
    scores: Vec<Tensor>,
}

fn run_decode(file: &ModelFile, obs: &[Vec<f64>], cfg: &DecodeConfig) -> Result<Decoded> {
    let weights = decode_weights(cfg, file.mi_profile.as_ref())?;
    let scores = emission_scores(&file.model, obs, cfg, weights.as_ref())?;
    let raw = viterbi_from_scores(&file.model, &scores)?;
    let ctx = reclassify_context(&file.model, cfg.reclassify)?;
    let r = reclassify(&raw, obs, cfg.reclassify, ctx.as_ref())?;
    if r.used_fallback {
        log::warn!("no hour decoded as dust; the humidity/wind rule used whole-sequence medians");
    }
    Ok(Decoded {
        raw,
        path: r.path,
        scores,
    })
}

fn fmt(x: f64) -> String {
    format!("{x}")
}

fn train(a: &TrainArgs) -> Result<()> {
    let ds = load(&a.input, fixtures::default_feature_names(), &a.ingest)?;
    let family = a.variant.family();
    let inflation = match ds.feature_names.iter().position(|f| f == "visibility") {
        Some(dim) => {
            let vis: Vec<f64> = ds.features.iter().map(|r| r[dim]).collect();
            let rep = detect_inflation(&vis)?;
            if rep.sparse {
                log::warn!(
                    "only {:.3}% of visibility values sit at the maximum {}; fitting without an atom",
                    100.0 * rep.fraction,
                    rep.c
                );
                None
            } else {
                Some(InflationSpec { dim, c: rep.c })
            }
        }
        None => None,
    };

    let (model, labels) = match a.mode {
        TrainMode::Supervised => {
            let labels = ds.require_labels()?.to_vec();
            let mut cfg = SupervisedConfig::new(family, ds.feature_names.clone()).with_inflation(inflation);
            cfg.fix_correlation = a.variant.fixed_identity_correlation();
            (supervised_fit(&ds.features, &labels, &cfg)?, labels)
        }
        TrainMode::Em => {
            let priors = ClassPriors {
                prior_means: fixtures::INITIAL_MU.iter().map(|r| r.to_vec()).collect(),
            };
            let mut kc = KmeansConfig::new(family, ds.feature_names.clone(), a.seed);
            kc.inflation = inflation;
            let mut init = kmeans_init(&ds.features, &priors, &kc)?;
            let fix = a.variant.fixed_identity_correlation();
            if fix {
                let e = init.emissions.dim();
                init.emissions.r_global = nalgebra::DMatrix::identity(e, e);
            }
            let cfg = EmConfig {
                max_iters: a.max_iters,
                tol: a.tol,
                seed: a.seed,
                fix_correlation: fix,
                ..Default::default()
            };
            let res = em_fit(&ds.features, &init, &cfg)?;
            println!(
                "em: {} iterations, converged {}, log-likelihood {:.6}",
                res.iterations(),
                res.converged,
                res.trace.last().copied().unwrap_or(f64::NAN)
            );
            // unlabeled input: the MI table is built from the decoded path
            let labels = match ds.labels.clone() {
                Some(l) => l,
                None => {
                    let file = ModelFile::new(res.model.clone());
                    run_decode(&file, &ds.features, &DecodeConfig::default())?.raw.states
                }
            };
            (res.model, labels)
        }
    };

    let mut file = ModelFile::new(model);
    file.variant = Some(a.variant);
    if a.variant.weighting() != Weighting::None {
        file.mi_profile = Some(mi_state_conditional(&ds.features, &labels, a.k)?);
    }
    file.save(&a.out)?;
    println!("wrote {} ({} rows, variant {})", a.out.display(), ds.len(), a.variant);
    Ok(())
}

fn decode(a: &DecodeArgs) -> Result<()> {
    let file = load_model(&a.model)?;
    let ds = load(&a.input, file.model.feature_names.clone(), &a.ingest)?;
    let cfg = decode_config(&file, &a.overrides)?;
    let d = run_decode(&file, &ds.features, &cfg)?;
    let rows = ds.timestamps.iter().zip(&d.path.states).map(|(ts, s)| {
        vec![
            ts.clone(),
            u8::from(s.haze).to_string(),
            u8::from(s.dust).to_string(),
            s.label().to_string(),
        ]
    });
    write_csv(&a.out, &["timestamp", "haze", "dust", "class"], rows)?;
    println!("wrote {} ({} rows, score {:.6})", a.out.display(), ds.len(), d.path.score);
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let file = load_model(&a.model)?;
    let ds = load(&a.input, file.model.feature_names.clone(), &a.ingest)?;
    let truth: Vec<Class> = ds.require_labels()?.iter().map(|&s| Class::from_truth(s)).collect();
    let cfg = decode_config(&file, &a.overrides)?;
    let d = run_decode(&file, &ds.features, &cfg)?;
    let pred = to_three_class(&d.path.states)?;
    let cm = ConfusionMatrix::from_labels(&truth, &pred)?;
    let f1 = f1_scores(&cm)?;
    let post = posteriors_from_log_emissions(&file.model, &d.scores, false)?;
    let roc = roc_auc(&class_scores(&post.gamma), &truth)?;

    let names: Vec<String> = Class::ALL.iter().map(|c| c.name().to_ascii_lowercase()).collect();
    let per_class_f1: serde_json::Map<String, serde_json::Value> =
        Class::ALL.iter().map(|&c| (c.name().to_ascii_lowercase(), json!(f1.class(c)))).collect();
    let per_class_auc: serde_json::Map<String, serde_json::Value> = Class::ALL
        .iter()
        .zip(&roc.per_class)
        .map(|(c, r)| (c.name().to_ascii_lowercase(), json!(r.auc)))
        .collect();
    let report = json!({
        "variant": file.variant.map(|v| v.as_str()),
        "weighting": cfg.weighting.as_str(),
        "omega": cfg.omega,
        "v": cfg.v,
        "reclassify": cfg.reclassify.as_str(),
        "rows": ds.len(),
        "classes": names,
        "confusion": cm.counts,
        "per_class_f1": per_class_f1,
        "micro_f1": f1.micro,
        "macro_f1": f1.macro_,
        "auc": {
            "per_class": per_class_auc,
            "micro": roc.micro.auc,
            "macro": roc.macro_auc,
        },
    });
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    write_atomic(&a.out, text.as_bytes())?;
    println!(
        "micro-F1 {:.4}  macro-F1 {:.4}  dust F1 {:.4}",
        f1.micro,
        f1.macro_,
        f1.class(Class::Dust)
    );
    Ok(())
}

fn forecast(a: &ForecastArgs) -> Result<()> {
    if a.horizon == 0 {
        return Err(user("--horizon must be at least 1"));
    }
    let file = load_model(&a.model)?;
    let ds = load(&a.input, file.model.feature_names.clone(), &a.ingest)?;
    let cfg = decode_config(&file, &a.overrides)?;
    let weights = decode_weights(&cfg, file.mi_profile.as_ref())?;
    let scores = emission_scores(&file.model, &ds.features, &cfg, weights.as_ref())?;
    let fwd = forward_from_log_emissions(&file.model, &scores)?;
    let last = fwd.alpha.last().expect("non-empty input");
    let dist = forecast_horizons(&file.model, last, a.horizon)?;
    let idx = |haze: bool, dust: bool| HiddenState::new(haze, dust).index();
    let order = [idx(false, false), idx(true, false), idx(false, true), idx(true, true)];
    let rows = dist.iter().enumerate().map(|(i, p)| {
        let mut r = vec![(i + 1).to_string()];
        r.extend(order.iter().map(|&j| fmt(p[j])));
        r
    });
    write_csv(&a.out, &["h", "p_clear", "p_haze", "p_dust", "p_both"], rows)?;
    println!("wrote {} ({} horizons)", a.out.display(), a.horizon);
    Ok(())
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    if a.length == 0 {
        return Err(user("--length must be at least 1"));
    }
    let file = load_model(&a.model)?;
    let s = sample_sequence(&file.model, a.length, a.seed)?;
    let ds = Dataset {
        timestamps: hourly_timestamps(a.length),
        feature_names: file.model.feature_names.clone(),
        features: s.obs,
        labels: Some(s.states),
    };
    write_dataset(&a.out, &ds)?;
    println!("wrote {} ({} rows)", a.out.display(), a.length);
    Ok(())
}

fn gridsearch(a: &GridArgs) -> Result<()> {
    let file = load_model(&a.model)?;
    let ds = load(&a.input, file.model.feature_names.clone(), &a.ingest)?;
    let truth: Vec<Class> = ds.require_labels()?.iter().map(|&s| Class::from_truth(s)).collect();
    let overrides = DecodeOverrides {
        omega: None,
        v: None,
        reclassify: a.reclassify,
    };
    let base = decode_config(&file, &overrides)?;
    if base.weighting == Weighting::None {
        return Err(user("gridsearch needs a model trained with a weighted variant"));
    }
    let ctx = reclassify_context(&file.model, base.reclassify)?;
    let g = grid_search(
        &file.model,
        &ds.features,
        &truth,
        &base,
        file.mi_profile.as_ref(),
        ctx.as_ref(),
        &a.omega_range,
        &a.v_range,
    )?;
    let rows = g.points.iter().map(|p| {
        vec![fmt(p.omega), fmt(p.v), fmt(p.micro_f1), fmt(p.macro_f1), fmt(p.dust_f1)]
    });
    write_csv(&a.out, &["omega", "v", "micro_f1", "macro_f1", "dust_f1"], rows)?;
    let b = g.best_point();
    println!(
        "best omega {} v {}: macro-F1 {:.4} micro-F1 {:.4}",
        b.omega, b.v, b.macro_f1, b.micro_f1
    );
    Ok(())
}

fn mi_report(a: &MiArgs) -> Result<()> {
    let ds = load(&a.input, fixtures::default_feature_names(), &a.ingest)?;
    let labels = ds.require_labels()?;
    let mi: StateMi = mi_state_conditional(&ds.features, labels, a.k)?;
    let mut rows = Vec::new();
    for s in 0..NUM_STATES {
        let state = HiddenState::from_index(s).expect("joint index in range").label();
        for (i, name) in ds.feature_names.iter().enumerate() {
            rows.push(vec![
                state.to_string(),
                name.clone(),
                fmt(mi.values[s][i]),
                u8::from(mi.fallback[s]).to_string(),
            ]);
        }
    }
    write_csv(&a.out, &["state", "feature", "mi", "fallback"], rows)?;
    println!("wrote {} (k = {})", a.out.display(), a.k);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => train(a),
        Command::Decode(a) => decode(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Forecast(a) => forecast(a),
        Command::Simulate(a) => simulate(a),
        Command::Gridsearch(a) => gridsearch(a),
        Command::MiReport(a) => mi_report(a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<FhmmError>()) {
        Some(e) if e.is_user_error() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
