use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use camtrap_core::config::EngineConfig;
use camtrap_core::embedding::{read_store, ToyEmbedder};
use camtrap_core::ingest::{read_labels, LabelSpace};
use camtrap_core::merge::predictions_csv;
use camtrap_core::metrics::{collapse_empty, confusion};
use camtrap_core::pipeline::Lambda;
use camtrap_core::store::{atomic_write, Project};
use camtrap_core::synth::{generate_synthetic_project, SynthSpec};
use camtrap_core::tuning::{make_station_partition, tuning_csv, Split};
use camtrap_core::Error;
use camtrap_service::ServiceError;

use crate::{Cli, Command, LambdaArgs, SynthArgs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),

    #[error(transparent)]
    Service(#[from] ServiceError),

    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        let validation = match self {
            CliError::Core(e) | CliError::Service(ServiceError::Core(e)) => e.is_validation(),
            CliError::Service(_) => false,
            CliError::Usage(_) => true,
        };
        if validation {
            2
        } else {
            1
        }
    }
}

type CliResult<T> = Result<T, CliError>;

const STATION_PARTITION_EXPORT: &str = "exports/station_partition.csv";
const QUEUE_EXPORT: &str = "exports/queue.csv";
const MODEL_PREDICTIONS_EXPORT: &str = "exports/model_predictions.csv";

struct Out {
    quiet: bool,
}

impl Out {
    fn say(&self, text: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", text.as_ref());
        }
    }
}

fn load_config(cli: &Cli) -> CliResult<Option<EngineConfig>> {
    Ok(cli.config.as_deref().map(EngineConfig::load).transpose()?)
}

/// Open the project for writing with the global overrides applied.
fn open(cli: &Cli) -> CliResult<Project> {
    let mut project = Project::open(&cli.project)?;
    if let Some(seed) = cli.seed {
        project.manifest.seed = seed;
    }
    if let Some(cfg) = load_config(cli)? {
        project.manifest.config = cfg;
    }
    Ok(project)
}

fn write_export(project: &Project, rel: &str, text: &str) -> CliResult<PathBuf> {
    let path = project.path(rel);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
    }
    atomic_write(&path, text.as_bytes())?;
    Ok(path)
}

fn tristate(yes: bool, no: bool) -> Option<bool> {
    match (yes, no) {
        (true, _) => Some(true),
        (_, true) => Some(false),
        _ => None,
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let out = Out { quiet: cli.quiet };
    match &cli.command {
        Command::Init { classes } => {
            let space = LabelSpace::new(classes.iter().map(String::as_str))?;
            let config = load_config(cli)?.unwrap_or_default();
            let mut p = Project::init(&cli.project, space, config, cli.seed.unwrap_or(0))?;
            p.save()?;
            out.say(format!("created project at {}", cli.project.display()));
        }
        Command::Ingest {
            images,
            labels,
            detections,
        } => {
            let mut p = open(cli)?;
            let warnings = p.ingest(images, labels.as_deref(), detections)?;
            for w in &warnings {
                log::warn!("{w}");
            }
            p.save()?;
            out.say(format!(
                "ingested {} images ({} labeled, {} warnings)",
                p.dataset.len(),
                p.dataset.labeled_ids().len(),
                warnings.len()
            ));
        }
        Command::Synth(args) => synth(cli, args, &out)?,
        Command::Embed { toy, import } => {
            let mut p = open(cli)?;
            let n = if *toy {
                p.embed_pixels(&ToyEmbedder::default())?
            } else {
                let path = import.as_ref().expect("clap requires --toy or --import");
                let store = read_store(path)?;
                let n = store.len();
                p.add_store(store)?;
                n
            };
            p.save()?;
            out.say(format!("stored {n} embeddings"));
        }
        Command::Split {
            fractions,
            stratify,
            no_stratify,
            stations,
        } => {
            let mut p = open(cli)?;
            if let Some(fraction) = stations {
                let (inside, outside) =
                    make_station_partition(&p.dataset, *fraction, p.manifest.seed)?;
                let mut csv = String::from("station_id,part\n");
                for s in &inside {
                    let _ = writeln!(csv, "{s},in");
                }
                for s in &outside {
                    let _ = writeln!(csv, "{s},out");
                }
                let path = write_export(&p, STATION_PARTITION_EXPORT, &csv)?;
                p.save()?;
                out.say(format!(
                    "{} stations in-sample, {} out-of-sample -> {}",
                    inside.len(),
                    outside.len(),
                    path.display()
                ));
            } else {
                let fractions = fractions.as_ref().map(|f| [f[0], f[1], f[2]]);
                let sizes = p
                    .make_split(fractions, tristate(*stratify, *no_stratify))?
                    .sizes();
                p.save()?;
                out.say(format!(
                    "train {}  val {}  test {}",
                    sizes[0], sizes[1], sizes[2]
                ));
            }
        }
        Command::Tune { embedders } => {
            let mut p = open(cli)?;
            let result = p.tune(embedders.as_deref())?;
            p.save()?;
            out.say(tuning_csv(&result.records).trim_end());
            out.say(format!(
                "best: {} at alpha {}",
                result.lambda_star.embedder.name, result.lambda_star.alpha
            ));
        }
        Command::Train(args) => {
            let mut p = open(cli)?;
            let lambda = lambda_from(&p, args)?;
            let (_, curve) = p.train(lambda)?;
            p.save()?;
            let lambda = p.manifest.lambda.clone().expect("train records lambda");
            out.say(format!(
                "trained {} at alpha {}: final loss {:.5}",
                lambda.embedder.name,
                lambda.alpha,
                curve.last().copied().unwrap_or(f64::NAN)
            ));
        }
        Command::Eval {
            part,
            collapse_empty,
        } => eval(cli, part, *collapse_empty, &out)?,
        Command::AlSelect {
            batch_size,
            stratified,
            unstratified,
        } => {
            let mut p = open(cli)?;
            let batch = p.al_select(*batch_size, tristate(*stratified, *unstratified))?;
            let mut csv = String::from("image_id,station_id,file_path\n");
            for id in &batch {
                let r = p
                    .dataset
                    .image(id)
                    .expect("selected ids come from the dataset");
                let _ = writeln!(
                    csv,
                    "{},{},{}",
                    id,
                    r.station_id,
                    r.file_path.as_deref().unwrap_or("")
                );
            }
            write_export(&p, QUEUE_EXPORT, &csv)?;
            p.save()?;
            for id in &batch {
                out.say(id);
            }
            log::info!("queued {} images; list in {QUEUE_EXPORT}", batch.len());
        }
        Command::AlLabel { file, any } => {
            let mut p = open(cli)?;
            let pairs = read_labels(file)?;
            let accepted = p.al_label(&pairs, !any)?;
            p.save()?;
            out.say(format!("accepted {accepted} of {} labels", pairs.len()));
        }
        Command::AlIterate {
            skip_tuning,
            tune,
            start_mode,
        } => {
            let mut p = open(cli)?;
            let mode = start_mode.as_deref().map(str::parse).transpose()?;
            let record = p.al_iterate(tristate(*skip_tuning, *tune), mode)?;
            p.save()?;
            out.say(format!(
                "iteration {}: {} labels, {} at alpha {}, accuracy {:.4}, weighted F1 {:.4}, coverage {:.3}",
                record.iteration,
                record.labeled_count,
                record.lambda.embedder.name,
                record.lambda.alpha,
                record.accuracy,
                record.weighted_f1,
                record.coverage
            ));
        }
        Command::AlFinalize => {
            let mut p = open(cli)?;
            let predictions = p.al_finalize()?;
            p.save()?;
            let rel = p.manifest.predictions.clone().unwrap_or_default();
            out.say(format!(
                "{} predictions -> {}",
                predictions.len(),
                p.path(&rel).display()
            ));
        }
        Command::Serve { addr } => {
            if cli.seed.is_some() || cli.config.is_some() {
                open(cli)?.save()?;
            }
            let runtime = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .map_err(ServiceError::Server)?;
            runtime.block_on(camtrap_service::serve(&cli.project, *addr))?;
        }
        Command::Predict { out: target } => {
            let mut p = open(cli)?;
            let predictions = p.predict(None)?;
            let csv = predictions_csv(&predictions, p.dataset.label_space());
            let path = match target {
                Some(path) => {
                    atomic_write(path, csv.as_bytes())?;
                    path.clone()
                }
                None => write_export(&p, MODEL_PREDICTIONS_EXPORT, &csv)?,
            };
            p.save()?;
            out.say(format!(
                "{} predictions -> {}",
                predictions.len(),
                path.display()
            ));
        }
    }
    Ok(())
}

fn synth(cli: &Cli, args: &SynthArgs, out: &Out) -> CliResult<()> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("--spec {}: {e}", path.display())))?;
            toml::from_str::<SynthSpec>(&text)
                .map_err(|e| Error::InvalidSpec(format!("{}: {e}", path.display())))?
        }
        None => SynthSpec::default(),
    };
    if let Some(n) = args.images {
        spec.n_images = n;
    }
    if let Some(s) = args.stations {
        spec.n_stations = s;
    }
    if let Some(f) = args.labeled_fraction {
        spec.labeled_fraction = f;
    }
    let space = spec.validate()?;
    let seed = cli.seed.unwrap_or(0);
    let synth = generate_synthetic_project(&spec, seed)?;
    let config = load_config(cli)?.unwrap_or_default();
    let mut p = Project::init(&cli.project, space, config, seed)?;
    p.set_dataset(synth.dataset.clone())?;
    for store in &synth.stores {
        p.add_store(store.clone())?;
    }
    synth.write_files(&synth_dir(&cli.project))?;
    p.save()?;
    out.say(format!(
        "generated {} images over {} stations; truth in {}",
        spec.n_images,
        spec.n_stations,
        synth_dir(&cli.project).join("truth.csv").display()
    ));
    Ok(())
}

fn synth_dir(root: &Path) -> PathBuf {
    root.join("synth")
}

fn lambda_from(p: &Project, args: &LambdaArgs) -> CliResult<Option<Lambda>> {
    if args.embedder.is_none() && args.alpha.is_none() {
        return Ok(None);
    }
    let fallback = p.default_lambda()?;
    let embedder = match &args.embedder {
        Some(name) => p
            .embedder_ids()
            .into_iter()
            .find(|e| &e.name == name)
            .ok_or_else(|| Error::UnknownProvider(name.clone()))?,
        None => fallback.embedder,
    };
    let alpha = args.alpha.unwrap_or(fallback.alpha);
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CliError::Usage(format!(
            "--alpha {alpha} must lie in [0,1]"
        )));
    }
    Ok(Some(Lambda::new(embedder, alpha)))
}

fn eval(cli: &Cli, part: &str, collapse: bool, out: &Out) -> CliResult<()> {
    let part: Split = part.parse()?;
    let mut p = open(cli)?;
    let ev = p.evaluate(part)?;
    let slug = part.as_str();
    match &ev.bb {
        Some(bb) => {
            out.say(format!("bounding-box level ({slug}):\n{bb}\n"));
            write_export(&p, &format!("exports/eval_{slug}_bb.csv"), &bb.to_csv())?;
        }
        None => out.say("bounding-box level: no crops\n"),
    }
    out.say(format!(
        "image level ({slug}, coverage {:.3}):\n{}",
        ev.coverage, ev.image
    ));
    write_export(
        &p,
        &format!("exports/eval_{slug}_image.csv"),
        &ev.image.to_csv(),
    )?;
    if collapse {
        let labels = p.labels();
        let (truth, predicted): (Vec<&str>, Vec<&str>) = ev
            .predictions
            .iter()
            .filter(|pr| !pr.abstained)
            .filter_map(|pr| {
                labels
                    .get(&pr.image_id)
                    .map(|t| (t.as_str(), pr.label.as_str()))
            })
            .unzip();
        let cm = collapse_empty(&confusion(&truth, &predicted, p.dataset.label_space())?);
        let table = cm.to_csv();
        out.say(format!("\nempty vs non-empty:\n{}", table.trim_end()));
        write_export(&p, &format!("exports/eval_{slug}_collapsed.csv"), &table)?;
    }
    p.save()?;
    Ok(())
}
