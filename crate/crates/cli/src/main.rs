mod config;
mod failure;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use engage_core::dataset::{ingest, parse_detections, write_detections, write_embedding_table, write_ratings, DatasetManifest, RatingTable, SessionFiles};
use engage_core::evaluation::{comparison_table, loso_evaluate, EvaluationReport};
use engage_core::fusion::{channel_samples, train_channel, write_predictions, Predictor};
use engage_core::personalization::{personal_split, run_personalization, write_curve, PersonalizationConfig, SessionSetup, SimulatedOracle, Strategy};
use engage_core::synthetic::{generate_synthetic_dataset, SyntheticConfig};
use engage_core::tracklets::{assemble_sequences, build_tracklets, gallery_to_json, parse_gallery};
use engage_core::{Channel, Dataset, Family, Modality};
use engage_service::{BaseModel, DatasetFactory, SessionManager};

use config::Config;
use failure::Failure;

#[derive(Parser)]
#[command(name = "engage", version, about = "Classroom engagement classification and personalization")]
struct Cli {
    /// TOML or JSON file with classifier, channel, thresholds and
    /// personalization settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every randomized step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a labeled dataset from a manifest's embedding and rating files.
    Ingest {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attribute raw face detections to students and cut sequences.
    Tracklets {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        session: String,
        /// Minimum cosine similarity for an identity match.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one channel's model on a labeled dataset.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        /// Leave this student out of training.
        #[arg(long)]
        exclude: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Leave-one-subject-out evaluation over families and channels.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long = "family")]
        families: Vec<Family>,
        #[arg(long = "channel")]
        channels: Vec<Channel>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-second predictions of a trained model, fused as the model's channel dictates.
    Fuse {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        student: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Active-learning personalization against stored labels or a human.
    Personalize(PersonalizeArgs),
    /// Print evaluation reports as a comparison table.
    Report {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Write a synthetic corpus: embedding, detection and rating files plus a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        students: usize,
        #[arg(long, default_value_t = 400)]
        seconds: u32,
        #[arg(long, default_value_t = 3.0)]
        separation: f64,
        #[arg(long, default_value_t = 0.0)]
        shift: f64,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    family: Option<Family>,
    #[arg(long)]
    channel: Option<Channel>,
}

#[derive(Args)]
#[group(id = "mode", required = true, multiple = false, args = ["simulated", "serve"])]
struct PersonalizeArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Answer queries from the dataset's own labels.
    #[arg(long)]
    simulated: bool,
    /// Serve sessions over HTTP for a human annotator.
    #[arg(long)]
    serve: bool,
    /// Student to personalize for (simulated mode).
    #[arg(long, required_if_eq("simulated", "true"))]
    student: Option<String>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    /// AUROC curve CSV (simulated mode).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    match s {
        "margin" => Ok(Strategy::Margin),
        "random" => Ok(Strategy::Random),
        other => Err(format!("unknown strategy {other:?}; expected margin or random")),
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn load_dataset(path: &Path) -> Result<Dataset, Failure> {
    Dataset::from_json(&read(path)?).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn manifest_path(flag: Option<PathBuf>, cfg: &Config) -> Result<PathBuf, Failure> {
    flag.or_else(|| cfg.manifest.clone())
        .ok_or_else(|| Failure::validation("no manifest given; pass --manifest or set manifest in the config"))
}

fn load_manifest(path: &Path) -> Result<DatasetManifest, Failure> {
    let m = DatasetManifest::from_json(&read(path)?).map_err(|e| match e {
        engage_core::Error::Json(j) => Failure::data(format!("{}: {j}", path.display())),
        other => other.into(),
    })?;
    Ok(m)
}

fn personalization_config(cfg: &Config, args: &PersonalizeArgs, seed: Option<u64>) -> PersonalizationConfig {
    let mut p = cfg.personalization.unwrap_or_default();
    if let Some(e) = args.episodes {
        p.episodes = e;
    }
    if let Some(b) = args.batch {
        p.batch = b;
    }
    if let Some(s) = args.strategy {
        p.strategy = s;
    }
    if let Some(s) = seed {
        p.seed = s;
    }
    p
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let seed = cli.seed;
    match cli.command {
        Command::Ingest { manifest, out } => {
            let path = manifest_path(manifest, &cfg)?;
            let mut m = load_manifest(&path)?;
            if let Some(t) = cfg.thresholds {
                m.thresholds = t;
            }
            let base = path.parent().unwrap_or(Path::new("."));
            let (set, report) = ingest::<f64>(&m, base)?;
            write(&out, set.to_json()?)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Tracklets {
            manifest,
            detections,
            gallery,
            session,
            threshold,
            out,
        } => {
            let m = load_manifest(&manifest_path(manifest, &cfg)?)?;
            let threshold = threshold.or(cfg.identity_threshold).unwrap_or(0.5);
            if !(-1.0..=1.0).contains(&threshold) {
                return Err(Failure::validation(format!("identity threshold {threshold} outside [-1, 1]")));
            }
            let dets = parse_detections::<f64>(&detections, &read(&detections)?, &m)?;
            let gallery = parse_gallery::<f64>(&read(&gallery)?)?;
            let tracklets = build_tracklets(&dets, &gallery, threshold)?;
            let sequences = assemble_sequences(&tracklets, &session);
            write(&out, serde_json::to_string(&sequences)?)?;
            println!(
                "{} detections, {} tracklets, {} sequences",
                dets.len(),
                tracklets.len(),
                sequences.len()
            );
        }
        Command::Train { model, exclude, out } => {
            let set = load_dataset(&model.dataset)?;
            let spec = cfg.spec(model.family, seed)?;
            let channel = cfg.channel(model.channel);
            let samples: Vec<_> = channel_samples(&set, channel)
                .into_iter()
                .filter(|s| exclude.as_deref() != Some(s.input.student_id()))
                .collect();
            let predictor = train_channel(&spec, channel, &samples)?;
            write(&out, predictor.to_json()?)?;
            println!("trained {} on {} seconds ({})", spec.family.as_str(), samples.len(), channel.as_str());
        }
        Command::Evaluate {
            dataset,
            families,
            channels,
            out,
        } => {
            let set = load_dataset(&dataset)?;
            let families = if families.is_empty() { vec![cfg.spec(None, seed)?.family] } else { families };
            let channels = if channels.is_empty() { vec![cfg.channel(None)] } else { channels };
            let mut reports = Vec::new();
            for &family in &families {
                let spec = cfg.spec(Some(family), seed)?;
                for &channel in &channels {
                    reports.push(loso_evaluate(&set, &spec, channel, &cfg.thresholds())?);
                }
            }
            print!("{}", comparison_table(&reports));
            if let Some(out) = out {
                write(&out, serde_json::to_string_pretty(&reports)?)?;
            }
        }
        Command::Fuse {
            model,
            dataset,
            student,
            out,
        } => {
            let predictor = Predictor::from_json(&read(&model)?)?;
            let set = load_dataset(&dataset)?;
            let preds = channel_samples(&set, predictor.channel())
                .iter()
                .filter(|s| student.as_deref().is_none_or(|id| id == s.input.student_id()))
                .map(|s| predictor.predict_sequence(&s.input))
                .collect::<Result<Vec<_>, _>>()?;
            let mut buf = Vec::new();
            write_predictions(&mut buf, &preds)?;
            write(&out, buf)?;
            println!("{} predictions", preds.len());
        }
        Command::Personalize(args) => {
            let set = load_dataset(&args.model.dataset)?;
            let spec = cfg.spec(args.model.family, seed)?;
            let channel = cfg.channel(args.model.channel);
            let pcfg = personalization_config(&cfg, &args, seed);
            let fraction = cfg.pool_fraction.unwrap_or(0.5);
            if args.serve {
                let models = BTreeMap::from([(
                    "default".to_string(),
                    BaseModel {
                        spec,
                        channel,
                        predictors: BTreeMap::new(),
                    },
                )]);
                let mut factory = DatasetFactory::new(set, models);
                factory.pool_fraction = fraction;
                factory.split_seed = seed.unwrap_or(0);
                let manager = Arc::new(SessionManager::new(factory));
                let rt = tokio::runtime::Runtime::new()?;
                println!("serving model \"default\" on http://{}", args.addr);
                rt.block_on(engage_service::serve(manager, &args.addr))?;
            } else {
                let student = args.student.clone().ok_or_else(|| Failure::validation("--simulated needs --student"))?;
                let (mine, base): (Vec<_>, Vec<_>) = channel_samples(&set, channel)
                    .into_iter()
                    .partition(|s| s.input.student_id() == student);
                if mine.is_empty() {
                    return Err(Failure::validation(format!("no labeled seconds for student {student}")));
                }
                let (pool, truth, test) = personal_split(mine, fraction, seed.unwrap_or(0))?;
                let outcome = run_personalization(
                    SessionSetup {
                        token: format!("{student}-simulated"),
                        spec,
                        channel,
                        base_training: base,
                        pool,
                        test,
                        config: pcfg,
                        base_predictor: None,
                    },
                    &mut SimulatedOracle::new(truth),
                )?;
                let mut buf = Vec::new();
                write_curve(&mut buf, &outcome.auroc_curve, pcfg.batch)?;
                match &args.out {
                    Some(out) => write(out, &buf)?,
                    None => print!("{}", String::from_utf8_lossy(&buf)),
                }
                let first = outcome.auroc_curve[0];
                let last = *outcome.auroc_curve.last().unwrap_or(&first);
                println!("AUROC {first:.4} -> {last:.4} with {} labels", outcome.labels_used);
            }
        }
        Command::Report { inputs } => {
            let mut reports: Vec<EvaluationReport> = Vec::new();
            for p in &inputs {
                let batch: Vec<EvaluationReport> =
                    serde_json::from_str(&read(p)?).map_err(|e| Failure::data(format!("{}: {e}", p.display())))?;
                reports.extend(batch);
            }
            print!("{}", comparison_table(&reports));
            for r in &reports {
                if let Some(m) = r.pooled_confusion() {
                    println!("\n{} / {}", r.family.as_str(), r.channel.as_str());
                    print!("{}", m.to_table());
                }
            }
        }
        Command::Synth {
            out,
            students,
            seconds,
            separation,
            shift,
        } => {
            let data = generate_synthetic_dataset::<f64>(&SyntheticConfig {
                students,
                seconds,
                separation,
                shift,
                streams: true,
                thresholds: cfg.thresholds(),
                seed: seed.unwrap_or(0),
                ..Default::default()
            })?;
            fs::create_dir_all(&out)?;
            write(&out.join("cam0.csv"), write_embedding_table(&data.embeddings)?)?;
            write(&out.join("detections.csv"), write_detections(&data.detections)?)?;
            write(&out.join("gallery.json"), gallery_to_json(&data.gallery)?)?;
            let mut by_rater: BTreeMap<String, RatingTable<f64>> = BTreeMap::new();
            for (key, raters) in &data.ratings {
                for r in raters {
                    by_rater.entry(r.rater_id.clone()).or_default().insert(key.clone(), vec![r.clone()]);
                }
            }
            let mut ratings = BTreeMap::new();
            for (rater, table) in &by_rater {
                let name = format!("ratings_{rater}.csv");
                write(&out.join(&name), write_ratings(table)?)?;
                ratings.insert(rater.clone(), PathBuf::from(name));
            }
            let dim = |m: Modality| data.set.modality(m).next().map_or(0, |s| s.sequence.dim());
            let manifest = DatasetManifest {
                modality_dims: BTreeMap::from([(Modality::Attention, dim(Modality::Attention)), (Modality::Affect, dim(Modality::Affect))]),
                identity_dim: data.gallery.first().and_then(|g| g.query_vectors.first()).map(Vec::len),
                sessions: vec![SessionFiles {
                    session_id: "session1".into(),
                    embeddings: BTreeMap::from([("cam0".to_string(), PathBuf::from("cam0.csv"))]),
                    ratings,
                }],
                gallery: Some(PathBuf::from("gallery.json")),
                thresholds: cfg.thresholds(),
                fps: 24,
            };
            write(&out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
            write(&out.join("dataset.json"), data.set.to_json()?)?;
            println!("{} students, {} labeled sequences in {}", students, data.set.len(), out.display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
