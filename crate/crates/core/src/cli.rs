//! Subcommand front end wiring ingestion, featurization, training,
//! prompting, and evaluation. Exit codes: 0 success, 1 validation error,
//! 2 transport error.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis;
use crate::client::{
    run_batch, ChatProvider, ClientError, HttpChatProvider, MockChatProvider, ProviderConfig,
    TransportError,
};
use crate::config::{
    self, hash_json, write_atomic, write_meta_sidecar, ProviderSpec, RunConfig,
};
use crate::features::{
    acquire_embeddings, assemble_f8, assemble_f23, EmbeddingSource, FeatureVector, SchemaId,
};
use crate::model::{self, Sample, SchemaMap};
use crate::prompting::{
    build_p1, build_p2, render_transcript, select_fewshot, ParseMode, Strategy,
};
use crate::regress::{
    ridge_fit, train_gd, Batch, LinearModel, LossConfig, ModelFile, RegKind,
};

#[derive(Parser)]
#[command(name = "ambirate", version, about = "Word-sense plausibility rating pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset and write it in the canonical JSONL schema.
    Ingest {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema_map: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract F8 or F23 feature vectors using precomputed or fetched
    /// embeddings.
    Featurize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema_map: Option<PathBuf>,
        #[arg(long)]
        schema: SchemaId,
        /// Embeddings JSONL file, or an HTTP(S) base URL of an
        /// OpenAI-compatible embeddings endpoint.
        #[arg(long)]
        embeddings: String,
        #[arg(long, default_value = "text-embedding-3-small")]
        embed_model: String,
        #[arg(long, default_value = "OPENAI_API_KEY")]
        api_key_env: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model: closed-form ridge or the composite-loss gradient
    /// trainer with Spearman early stopping.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Additional split concatenated with --data before the internal
        /// holdout is carved (the retrain-on-train+dev protocol).
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        schema_map: Option<PathBuf>,
        #[arg(long, default_value = "gd")]
        method: String,
        #[arg(long, default_value = "mse")]
        loss: RegKind,
        #[arg(long, default_value_t = 0.25)]
        lambda_r: f64,
        #[arg(long, default_value_t = 0.5)]
        lambda_u: f64,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.15)]
        holdout: f64,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 500)]
        max_epochs: usize,
        #[arg(long, default_value_t = 3)]
        patience: usize,
        #[arg(long, default_value_t = 256)]
        pair_cap: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score feature vectors with a saved model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value = "linear")]
        system_id: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the prompt for one sample to stdout or a file.
    PromptRender {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema_map: Option<PathBuf>,
        #[arg(long)]
        strategy: Strategy,
        #[arg(long)]
        sample_id: String,
        /// Training data for P1 few-shot selection; defaults to --data.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long, default_value = "-")]
        out: String,
    },
    /// Run a prompting strategy over a dataset against a chat endpoint or
    /// a scripted mock.
    PromptRun {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema_map: Option<PathBuf>,
        #[arg(long)]
        strategy: Strategy,
        #[arg(long, default_value = "gpt-4o")]
        model: String,
        #[arg(long, default_value = "https://api.openai.com/v1")]
        base_url: String,
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long, default_value = "lenient")]
        parse: ParseMode,
        /// Scripted mock provider instead of HTTP; makes the run hermetic.
        #[arg(long)]
        mock_script: Option<PathBuf>,
        #[arg(long)]
        fewshot_from: Option<PathBuf>,
        #[arg(long)]
        system_id: Option<String>,
        #[arg(long, default_value = "OPENAI_API_KEY")]
        api_key_env: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the consolidated evaluation report.
    Evaluate {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema_map: Option<PathBuf>,
        #[arg(long)]
        system_id: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Error analysis: configurable buckets, worst cases, distributions.
    Analyze {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema_map: Option<PathBuf>,
        /// Comma-separated bucket edges from 1.0 to 5.0.
        #[arg(long)]
        buckets: Option<String>,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        #[arg(long)]
        dist_out: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full run from a single config: ingest, prompt, evaluate.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long)]
        parallelism: Option<usize>,
    },
}

/// Parses argv and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with zero exit
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_transport_error(&e) {
                2
            } else {
                1
            }
        }
    }
}

fn is_transport_error(e: &anyhow::Error) -> bool {
    e.chain().any(|cause| {
        cause.downcast_ref::<TransportError>().is_some()
            || matches!(
                cause.downcast_ref::<ClientError>(),
                Some(ClientError::Transport(_)) | Some(ClientError::BatchAborted { .. })
            )
    })
}

fn load_schema_map(path: &Option<PathBuf>) -> Result<SchemaMap> {
    match path {
        Some(p) => Ok(SchemaMap::from_file(p)?),
        None => Ok(SchemaMap::identity()),
    }
}

fn load_data(data: &Path, schema_map: &Option<PathBuf>) -> Result<Vec<Sample>> {
    if !data.exists() {
        bail!("data file does not exist: {}", data.display());
    }
    let map = load_schema_map(schema_map)?;
    Ok(model::load_samples(data, &map)?)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest { data, schema_map, out } => ingest(&data, &schema_map, &out),
        Command::Featurize {
            data,
            schema_map,
            schema,
            embeddings,
            embed_model,
            api_key_env,
            out,
        } => featurize(&data, &schema_map, schema, &embeddings, &embed_model, &api_key_env, &out),
        Command::Train {
            features,
            data,
            dev,
            schema_map,
            method,
            loss,
            lambda_r,
            lambda_u,
            alpha,
            seed,
            holdout,
            lr,
            max_epochs,
            patience,
            pair_cap,
            out,
        } => train(TrainArgs {
            features,
            data,
            dev,
            schema_map,
            method,
            loss,
            lambda_r,
            lambda_u,
            alpha,
            seed,
            holdout,
            lr,
            max_epochs,
            patience,
            pair_cap,
            out,
        }),
        Command::Predict {
            model,
            features,
            system_id,
            out,
        } => predict_cmd(&model, &features, &system_id, &out),
        Command::PromptRender {
            data,
            schema_map,
            strategy,
            sample_id,
            train,
            out,
        } => prompt_render(&data, &schema_map, strategy, &sample_id, &train, &out),
        Command::PromptRun {
            data,
            schema_map,
            strategy,
            model,
            base_url,
            temperature,
            parallelism,
            cache_dir,
            parse,
            mock_script,
            fewshot_from,
            system_id,
            api_key_env,
            out,
        } => {
            let provider_cfg = ProviderConfig {
                base_url: base_url.clone(),
                model: model.clone(),
                temperature,
                parallelism,
                api_key_env,
                ..ProviderConfig::default()
            };
            let provider: Box<dyn ChatProvider> = match &mock_script {
                Some(script) => Box::new(MockChatProvider::from_script_file(script)?),
                None => Box::new(HttpChatProvider::new(&provider_cfg)?),
            };
            let samples = load_data(&data, &schema_map)?;
            let sys_id = system_id.unwrap_or_else(|| {
                format!("{model}-{}", strategy_tag(strategy))
            });
            let hash = hash_json(&serde_json::json!({
                "strategy": strategy, "parse": parse, "model": model,
                "temperature": temperature, "system_id": sys_id,
            }));
            let fewshot = fewshot_from.unwrap_or_else(|| data.clone());
            prompt_run(
                &samples,
                strategy,
                &fewshot,
                &schema_map,
                &provider_cfg,
                provider.as_ref(),
                cache_dir.as_deref(),
                parse,
                &sys_id,
                &hash,
                0,
                &out,
            )
            .map(|_| ())
        }
        Command::Evaluate {
            preds,
            data,
            schema_map,
            system_id,
            out,
        } => evaluate(&preds, &data, &schema_map, &system_id, &out),
        Command::Analyze {
            preds,
            data,
            schema_map,
            buckets,
            top_k,
            dist_out,
            out,
        } => analyze(&preds, &data, &schema_map, &buckets, top_k, &dist_out, &out),
        Command::Pipeline {
            config,
            out_dir,
            cache_dir,
            parallelism,
        } => pipeline(&config, out_dir, cache_dir, parallelism),
    }
}

fn strategy_tag(strategy: Strategy) -> &'static str {
    match strategy {
        Strategy::P1 => "p1",
        Strategy::P2 => "p2",
    }
}

fn ingest(data: &Path, schema_map: &Option<PathBuf>, out: &Path) -> Result<()> {
    let samples = load_data(data, schema_map)?;
    write_atomic(out, model::to_canonical_jsonl(&samples).as_bytes())?;
    let hash = hash_json(&serde_json::json!({"op": "ingest", "n": samples.len()}));
    write_meta_sidecar(out, &hash, 0)?;
    eprintln!("ingested {} samples -> {}", samples.len(), out.display());
    Ok(())
}

fn featurize(
    data: &Path,
    schema_map: &Option<PathBuf>,
    schema: SchemaId,
    embeddings: &str,
    embed_model: &str,
    api_key_env: &str,
    out: &Path,
) -> Result<()> {
    let samples = load_data(data, schema_map)?;
    let source = if embeddings.starts_with("http://") || embeddings.starts_with("https://") {
        EmbeddingSource::Endpoint {
            base_url: embeddings.to_string(),
            model: embed_model.to_string(),
            api_key: std::env::var(api_key_env).ok(),
        }
    } else {
        EmbeddingSource::File(PathBuf::from(embeddings))
    };
    // embedding ids: "<sample_id>#story" and "<sample_id>#meaning"
    let story_texts: Vec<(String, String)> = samples
        .iter()
        .map(|s| (format!("{}#story", s.id), s.story_text()))
        .collect();
    let meaning_texts: Vec<(String, String)> = samples
        .iter()
        .map(|s| (format!("{}#meaning", s.id), s.judged_meaning.clone()))
        .collect();
    let transport = crate::client::HttpTransport::new(std::time::Duration::from_secs(60));
    fn as_refs(v: &[(String, String)]) -> Vec<(&str, &str)> {
        v.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect()
    }
    let story_embs = acquire_embeddings(&as_refs(&story_texts), &source, &transport)?;
    let meaning_embs = acquire_embeddings(&as_refs(&meaning_texts), &source, &transport)?;
    let mut features = Vec::with_capacity(samples.len());
    for ((sample, es), em) in samples.iter().zip(&story_embs).zip(&meaning_embs) {
        let fv = match schema {
            SchemaId::F8 => assemble_f8(sample, es, em)?,
            SchemaId::F23 => assemble_f23(sample, es, em)?,
        };
        features.push(fv);
    }
    config::write_features(out, &features)?;
    let hash = hash_json(&serde_json::json!({
        "op": "featurize", "schema": schema, "embed_model": embed_model,
    }));
    write_meta_sidecar(out, &hash, 0)?;
    eprintln!("wrote {} feature vectors -> {}", features.len(), out.display());
    Ok(())
}

struct TrainArgs {
    features: PathBuf,
    data: PathBuf,
    dev: Option<PathBuf>,
    schema_map: Option<PathBuf>,
    method: String,
    loss: RegKind,
    lambda_r: f64,
    lambda_u: f64,
    alpha: f64,
    seed: u64,
    holdout: f64,
    lr: f64,
    max_epochs: usize,
    patience: usize,
    pair_cap: usize,
    out: PathBuf,
}

struct JoinedRow {
    features: Vec<f64>,
    gold: f64,
    sigma: f64,
}

fn join_features(
    features: &[FeatureVector],
    samples: &[Sample],
) -> Result<(SchemaId, Vec<JoinedRow>)> {
    let by_id: std::collections::HashMap<&str, &FeatureVector> = features
        .iter()
        .map(|f| (f.sample_id.as_str(), f))
        .collect();
    let schema = features
        .first()
        .map(|f| f.schema_id)
        .ok_or_else(|| anyhow!("features file is empty"))?;
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let fv = by_id
            .get(s.id.as_str())
            .ok_or_else(|| anyhow!("no feature vector for sample '{}'", s.id))?;
        rows.push(JoinedRow {
            features: fv.values.clone(),
            gold: s.gold_mean,
            sigma: s.gold_std,
        });
    }
    Ok((schema, rows))
}

/// Carves a seeded validation split from joined rows and trains with early
/// stopping; used for both plain training and the train+dev retrain
/// protocol.
fn retrain_protocol(
    rows: Vec<JoinedRow>,
    holdout: f64,
    seed: u64,
    cfg: &LossConfig,
    lr: f64,
    max_epochs: usize,
    patience: usize,
) -> Result<(LinearModel, crate::regress::TrainReport, usize)> {
    if !(holdout > 0.0 && holdout < 0.5) {
        bail!("holdout fraction {holdout} out of range (0, 0.5)");
    }
    let n = rows.len();
    let val_size = (holdout * n as f64).round() as usize;
    if val_size == 0 || val_size >= n {
        bail!("holdout {holdout} leaves an empty split for {n} rows");
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let val_set: std::collections::HashSet<usize> = indices[..val_size].iter().copied().collect();
    let mut train_batch = Batch {
        features: vec![],
        golds: vec![],
        sigmas: vec![],
    };
    let mut val_batch = train_batch.clone();
    for (i, row) in rows.into_iter().enumerate() {
        let target = if val_set.contains(&i) {
            &mut val_batch
        } else {
            &mut train_batch
        };
        target.features.push(row.features);
        target.golds.push(row.gold);
        target.sigmas.push(row.sigma);
    }
    let (model, report) = train_gd(&train_batch, &val_batch, cfg, lr, max_epochs, patience)?;
    Ok((model, report, val_size))
}

fn train(args: TrainArgs) -> Result<()> {
    let mut samples = load_data(&args.data, &args.schema_map)?;
    if let Some(dev) = &args.dev {
        samples.extend(load_data(dev, &args.schema_map)?);
    }
    let features = config::load_features(&args.features)?;
    let (schema, rows) = join_features(&features, &samples)?;
    let hash = hash_json(&serde_json::json!({
        "op": "train", "method": args.method, "loss": args.loss,
        "lambda_r": args.lambda_r, "lambda_u": args.lambda_u,
        "alpha": args.alpha, "seed": args.seed, "holdout": args.holdout,
    }));

    let (model, sigma_normalized) = match args.method.as_str() {
        "ridge" => {
            let x: Vec<Vec<f64>> = rows.iter().map(|r| r.features.clone()).collect();
            let y: Vec<f64> = rows.iter().map(|r| r.gold).collect();
            (ridge_fit(&x, &y, args.alpha)?, false)
        }
        "gd" => {
            let cfg = LossConfig {
                reg_kind: args.loss,
                delta: 1.0,
                lambda_r: args.lambda_r,
                lambda_u: args.lambda_u,
                pair_cap: args.pair_cap,
                seed: args.seed,
            };
            let (model, report, val_size) = retrain_protocol(
                rows,
                args.holdout,
                args.seed,
                &cfg,
                args.lr,
                args.max_epochs,
                args.patience,
            )?;
            eprintln!(
                "trained {} epochs (best {}, val size {}), best val spearman {:.4}{}",
                report.epochs_run,
                report.best_epoch,
                val_size,
                report.best_val_spearman,
                if report.stopped_early { ", stopped early" } else { "" }
            );
            (model, true)
        }
        other => bail!("unknown method '{other}' (expected ridge or gd)"),
    };

    let file = ModelFile {
        schema_id: schema,
        weights: model.weights.clone(),
        bias: model.bias,
        label_space: model.label_space,
        sigma_normalized,
        config_hash: Some(hash),
        seed: Some(args.seed),
    };
    write_atomic(&args.out, serde_json::to_string_pretty(&file)?.as_bytes())?;
    eprintln!("model -> {}", args.out.display());
    Ok(())
}

fn predict_cmd(model_path: &Path, features: &Path, system_id: &str, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(model_path)
        .with_context(|| format!("cannot read model {}", model_path.display()))?;
    let file: ModelFile = serde_json::from_str(&text)
        .with_context(|| format!("invalid model file {}", model_path.display()))?;
    let model = file.model();
    let features = config::load_features(features)?;
    let mut preds = Vec::with_capacity(features.len());
    for fv in &features {
        if fv.schema_id != file.schema_id {
            bail!(
                "feature schema {:?} does not match model schema {:?}",
                fv.schema_id,
                file.schema_id
            );
        }
        preds.push(crate::model::Prediction {
            sample_id: fv.sample_id.clone(),
            score: crate::regress::predict(&model, fv)?,
            system_id: system_id.to_string(),
            raw_response: None,
        });
    }
    config::write_predictions(out, &preds)?;
    write_meta_sidecar(out, file.config_hash.as_deref().unwrap_or("-"), file.seed.unwrap_or(0))?;
    eprintln!("wrote {} predictions -> {}", preds.len(), out.display());
    Ok(())
}

fn prompt_render(
    data: &Path,
    schema_map: &Option<PathBuf>,
    strategy: Strategy,
    sample_id: &str,
    train: &Option<PathBuf>,
    out: &str,
) -> Result<()> {
    let samples = load_data(data, schema_map)?;
    let sample = samples
        .iter()
        .find(|s| s.id == sample_id)
        .ok_or_else(|| anyhow!("no sample with id '{sample_id}' in {}", data.display()))?;
    let bundle = match strategy {
        Strategy::P2 => build_p2(sample),
        Strategy::P1 => {
            let train_samples = match train {
                Some(p) => load_data(p, schema_map)?,
                None => samples.clone(),
            };
            let selection = select_fewshot(&train_samples)?;
            for w in &selection.warnings {
                eprintln!("warning: {w}");
            }
            build_p1(sample, &selection.shots)?
        }
    };
    let transcript = render_transcript(&bundle);
    if out == "-" {
        print!("{transcript}");
    } else {
        write_atomic(Path::new(out), transcript.as_bytes())?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn prompt_run(
    samples: &[Sample],
    strategy: Strategy,
    fewshot_from: &Path,
    schema_map: &Option<PathBuf>,
    provider_cfg: &ProviderConfig,
    provider: &dyn ChatProvider,
    cache_dir: Option<&Path>,
    parse: ParseMode,
    system_id: &str,
    config_hash: &str,
    seed: u64,
    out: &Path,
) -> Result<crate::client::RunLog> {
    let shots = match strategy {
        Strategy::P1 => {
            let train_samples = load_data(fewshot_from, schema_map)?;
            let selection = select_fewshot(&train_samples)?;
            for w in &selection.warnings {
                eprintln!("warning: {w}");
            }
            Some(selection.shots)
        }
        Strategy::P2 => None,
    };
    let (preds, log) = run_batch(
        samples,
        strategy,
        shots.as_deref(),
        provider_cfg,
        provider,
        cache_dir,
        parse,
        system_id,
    )?;
    config::write_predictions(out, &preds)?;
    write_meta_sidecar(out, config_hash, seed)?;
    eprintln!(
        "ran {} samples: {} provider calls, {} cache hits, {} parse failures",
        log.n,
        log.provider_calls,
        log.cache_hits,
        log.parse_failures.len()
    );
    Ok(log)
}

fn evaluate(
    preds: &Path,
    data: &Path,
    schema_map: &Option<PathBuf>,
    system_id: &Option<String>,
    out: &Path,
) -> Result<()> {
    let samples = load_data(data, schema_map)?;
    let predictions = config::load_predictions(preds)?;
    let sys_id = system_id
        .clone()
        .or_else(|| predictions.first().map(|p| p.system_id.clone()))
        .unwrap_or_else(|| "unknown".into());
    let mut report = analysis::build_report(&predictions, &samples, &sys_id, 0)?;
    report.config_hash = Some(hash_json(&serde_json::json!({
        "op": "evaluate", "system_id": sys_id,
    })));
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    write_atomic(out, text.as_bytes())?;
    println!(
        "{}: n={} spearman={:.4} accuracy={:.4} mae={:.4}",
        report.system_id, report.n, report.spearman, report.accuracy, report.mae
    );
    Ok(())
}

fn parse_bucket_edges(spec: &str) -> Result<Vec<f64>> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| anyhow!("invalid bucket edge '{s}'"))
        })
        .collect()
}

fn analyze(
    preds: &Path,
    data: &Path,
    schema_map: &Option<PathBuf>,
    buckets: &Option<String>,
    top_k: usize,
    dist_out: &Option<PathBuf>,
    out: &Path,
) -> Result<()> {
    let samples = load_data(data, schema_map)?;
    let predictions = config::load_predictions(preds)?;
    let edges = match buckets {
        Some(spec) => parse_bucket_edges(spec)?,
        None => analysis::DEFAULT_BUCKET_EDGES.to_vec(),
    };
    let bucket_table = analysis::bucketed_mae(&predictions, &samples, &edges)?;
    let split = analysis::disagreement_split(&predictions, &samples, 1.0)?;
    let worst = analysis::worst_cases(&predictions, &samples, top_k)?;
    if let Some(dist_path) = dist_out {
        let csv = analysis::distributions_csv(&predictions, &samples)?;
        write_atomic(dist_path, csv.as_bytes())?;
    }
    let output = serde_json::json!({
        "buckets": bucket_table,
        "disagreement": split,
        "worst_cases": worst,
        "config_hash": hash_json(&serde_json::json!({"op": "analyze", "edges": edges, "top_k": top_k})),
    });
    let mut text = serde_json::to_string_pretty(&output)?;
    text.push('\n');
    write_atomic(out, text.as_bytes())?;
    Ok(())
}

fn pipeline(
    config_path: &Path,
    out_dir: Option<PathBuf>,
    cache_dir: Option<PathBuf>,
    parallelism: Option<usize>,
) -> Result<()> {
    let mut cfg = RunConfig::from_file(config_path)?;
    if let Some(dir) = out_dir {
        cfg.out_dir = dir;
    }
    if let Some(dir) = cache_dir {
        cfg.cache_dir = Some(dir);
    }
    let hash = cfg.config_hash();
    let schema_map = cfg.schema_map.clone();
    let samples = load_data(&cfg.data, &schema_map)?;

    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("cannot create {}", cfg.out_dir.display()))?;
    let canonical = cfg.out_dir.join("canonical.jsonl");
    write_atomic(&canonical, model::to_canonical_jsonl(&samples).as_bytes())?;
    write_meta_sidecar(&canonical, &hash, cfg.seed)?;

    let (provider_cfg, provider): (ProviderConfig, Box<dyn ChatProvider>) = match &cfg.provider {
        ProviderSpec::Mock {
            script,
            model,
            parallelism: par,
        } => {
            let provider = MockChatProvider::from_script_file(script)?;
            let provider_cfg = ProviderConfig {
                model: model.clone(),
                parallelism: parallelism.unwrap_or(*par),
                ..ProviderConfig::default()
            };
            (provider_cfg, Box::new(provider))
        }
        ProviderSpec::Http {
            base_url,
            model,
            temperature,
            send_temperature,
            parallelism: par,
            api_key_env,
        } => {
            let provider_cfg = ProviderConfig {
                base_url: base_url.clone(),
                model: model.clone(),
                temperature: *temperature,
                send_temperature: *send_temperature,
                parallelism: parallelism.unwrap_or(*par),
                api_key_env: api_key_env.clone(),
                ..ProviderConfig::default()
            };
            let provider = HttpChatProvider::new(&provider_cfg)?;
            (provider_cfg, Box::new(provider))
        }
    };

    let preds_path = cfg.out_dir.join("predictions.jsonl");
    let fewshot = cfg.fewshot_from.clone().unwrap_or_else(|| cfg.data.clone());
    let log = prompt_run(
        &samples,
        cfg.strategy,
        &fewshot,
        &schema_map,
        &provider_cfg,
        provider.as_ref(),
        cfg.cache_dir.as_deref(),
        cfg.parse_mode,
        &cfg.system_id(),
        &hash,
        cfg.seed,
        &preds_path,
    )?;

    let runlog_path = cfg.out_dir.join("runlog.json");
    let mut log_value = serde_json::to_value(&log)?;
    log_value["config_hash"] = serde_json::json!(hash);
    log_value["seed"] = serde_json::json!(cfg.seed);
    let mut log_text = serde_json::to_string_pretty(&log_value)?;
    log_text.push('\n');
    write_atomic(&runlog_path, log_text.as_bytes())?;

    let predictions = config::load_predictions(&preds_path)?;
    let mut report = analysis::build_report(
        &predictions,
        &samples,
        &cfg.system_id(),
        log.parse_failures.len(),
    )?;
    report.config_hash = Some(hash.clone());
    report.seed = Some(cfg.seed);
    let mut report_text = serde_json::to_string_pretty(&report)?;
    report_text.push('\n');
    write_atomic(&cfg.out_dir.join("report.json"), report_text.as_bytes())?;

    let csv = analysis::distributions_csv(&predictions, &samples)?;
    let dist_path = cfg.out_dir.join("distributions.csv");
    write_atomic(&dist_path, csv.as_bytes())?;
    write_meta_sidecar(&dist_path, &hash, cfg.seed)?;

    println!(
        "{}: n={} spearman={:.4} accuracy={:.4} mae={:.4}",
        report.system_id, report.n, report.spearman, report.accuracy, report.mae
    );
    Ok(())
}
