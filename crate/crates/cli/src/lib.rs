//! Verb implementations behind the `gbenh` binary.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use gbuf_enhance::backbone::RandomConvBackbone;
use gbuf_enhance::config::ExperimentConfig;
use gbuf_enhance::dataset::{read_dataset, save_png, write_dataset};
use gbuf_enhance::discriminator::LabelMap;
use gbuf_enhance::labels::{precompute_labels, CachedLabels, GroundTruthLabels, LabelProvider};
use gbuf_enhance::metrics::{image_features, kid, layout_density, skvd, LabeledImage, MetricReport};
use gbuf_enhance::sampler::{embed_dataset, EmbeddingStore, MatchTable};
use gbuf_enhance::scenegen::{generate_dataset, SceneSample, StyleTag, NUM_CLASSES};
use gbuf_enhance::trainer::{generator_from_checkpoint, Condition, LossLog, PatchSource, TrainData, Trainer};
use gbuf_enhance::{Error, Exec};
use serde::Serialize;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "gbenh", version, about = "G-buffer conditioned image enhancement experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub verb: Verb,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Experiment TOML; the built-in toy profile when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Parent directory for run directories.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable data-parallel loops.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Subcommand, Debug)]
pub enum Verb {
    /// Render source and target toy datasets.
    GenerateScenes {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Fill the label cache for datasets.
    PrecomputeLabels {
        #[command(flatten)]
        common: Common,
        /// Dataset directories; data.source and data.target by default.
        #[arg(long)]
        dataset: Vec<PathBuf>,
    },
    /// Embed receptive-field patches of the source and target datasets.
    PrecomputeFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        per_image: Option<usize>,
    },
    /// Build the synthetic-to-real match table from stored embeddings.
    MatchPatches {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        threshold: Option<f64>,
    },
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        condition: Option<String>,
        /// Override train.total_iters.
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run a trained generator over a dataset.
    Enhance {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to data.source.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// KID and sKVD between two datasets.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Defaults to data.source.
        #[arg(long)]
        a: Option<PathBuf>,
        /// Defaults to data.target.
        #[arg(long)]
        b: Option<PathBuf>,
    },
    /// Per-class layout density maps as grayscale PNGs.
    LayoutStats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Vec<PathBuf>,
    },
}

impl Verb {
    pub fn name(&self) -> &'static str {
        match self {
            Verb::GenerateScenes { .. } => "generate-scenes",
            Verb::PrecomputeLabels { .. } => "precompute-labels",
            Verb::PrecomputeFeatures { .. } => "precompute-features",
            Verb::MatchPatches { .. } => "match-patches",
            Verb::Train { .. } => "train",
            Verb::Enhance { .. } => "enhance",
            Verb::Evaluate { .. } => "evaluate",
            Verb::LayoutStats { .. } => "layout-stats",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Verb::GenerateScenes { common, .. }
            | Verb::PrecomputeLabels { common, .. }
            | Verb::PrecomputeFeatures { common, .. }
            | Verb::MatchPatches { common, .. }
            | Verb::Train { common, .. }
            | Verb::Enhance { common, .. }
            | Verb::Evaluate { common, .. }
            | Verb::LayoutStats { common, .. } => common,
        }
    }
}

/// `<out>/<verb>-<timestamp>-<seed>/` with `config.snapshot`, `artifacts/`
/// and `log.csv`.
pub struct RunDir {
    pub root: PathBuf,
    pub artifacts: PathBuf,
}

impl RunDir {
    pub fn create(out: &Path, verb: &str, cfg: &ExperimentConfig) -> CliResult<Self> {
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%3fZ");
        let mut root = out.join(format!("{verb}-{stamp}-{}", cfg.seed));
        let mut k = 1;
        while root.exists() {
            root = out.join(format!("{verb}-{stamp}-{}.{k}", cfg.seed));
            k += 1;
        }
        let artifacts = root.join("artifacts");
        fs::create_dir_all(&artifacts)?;
        fs::write(root.join("config.snapshot"), cfg.to_toml())?;
        Ok(Self { root, artifacts })
    }

    pub fn log_path(&self) -> PathBuf {
        self.root.join("log.csv")
    }

    /// Key/value summary rows for verbs without a loss curve.
    pub fn write_log(&self, rows: &[(&str, String)]) -> CliResult<()> {
        let mut w = csv::Writer::from_path(self.log_path())?;
        w.write_record(["key", "value"])?;
        for (k, v) in rows {
            w.write_record([k, v.as_str()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn load_config(common: &Common) -> CliResult<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::toy(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn exec(common: &Common) -> Exec {
    if common.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn dataset_dir(field: &str, explicit: Option<&PathBuf>, configured: &Option<PathBuf>) -> CliResult<PathBuf> {
    match explicit {
        Some(p) => Ok(ExperimentConfig::existing(field, &Some(p.clone()))?),
        None => Ok(ExperimentConfig::existing(field, configured)?),
    }
}

fn provider(cfg: &ExperimentConfig) -> CliResult<Box<dyn LabelProvider>> {
    Ok(match &cfg.data.labels {
        Some(dir) => Box::new(CachedLabels::new(dir, GroundTruthLabels)?),
        None => Box::new(GroundTruthLabels),
    })
}

fn label_maps(samples: &[SceneSample], p: &dyn LabelProvider) -> CliResult<Vec<Vec<usize>>> {
    Ok(samples.iter().map(|s| p.labels(s)).collect::<Result<_, _>>()?)
}

#[derive(Serialize)]
struct Report<'a> {
    a: String,
    b: String,
    seed: u64,
    kid: &'a gbuf_enhance::metrics::SubsetProtocol,
    skvd: &'a gbuf_enhance::metrics::SkvdConfig,
    metrics: &'a [MetricReport],
}

/// Parses arguments already split off the program name and runs the verb.
/// Returns the run directory.
pub fn run(cli: Cli) -> CliResult<PathBuf> {
    let common = cli.verb.common().clone();
    let mut cfg = load_config(&common)?;
    if let Verb::Train { condition: Some(c), .. } = &cli.verb {
        cfg.condition = c.parse::<Condition>()?;
    }
    if let Verb::Train { iters: Some(n), .. } = &cli.verb {
        cfg.train.total_iters = *n;
        cfg.train.validate()?;
    }
    let ex = exec(&common);
    let run = RunDir::create(&common.out, cli.verb.name(), &cfg)?;
    match &cli.verb {
        Verb::GenerateScenes { n, .. } => {
            let n = n.unwrap_or(cfg.data.num_samples);
            for style in [StyleTag::Source, StyleTag::Target] {
                let samples = generate_dataset(&cfg.scenes, n, cfg.seed, style, ex)?;
                write_dataset(&samples, &run.artifacts.join(style.as_str()), ex)?;
            }
            run.write_log(&[("samples_per_style", n.to_string())])?;
        }
        Verb::PrecomputeLabels { dataset, .. } => {
            let dirs = if dataset.is_empty() {
                vec![
                    ExperimentConfig::existing("data.source", &cfg.data.source)?,
                    ExperimentConfig::existing("data.target", &cfg.data.target)?,
                ]
            } else {
                dataset.iter().map(|d| dataset_dir("--dataset", Some(d), &None)).collect::<CliResult<_>>()?
            };
            let cache = CachedLabels::new(run.artifacts.join("labels"), GroundTruthLabels)?;
            let mut rows = Vec::new();
            let mut index = Vec::new();
            for d in &dirs {
                let samples = read_dataset(d, ex)?;
                let files = precompute_labels(&samples, &cache)?;
                rows.push(("dataset", format!("{} ({} maps)", d.display(), files.len())));
                for (s, f) in samples.iter().zip(files) {
                    index.push(serde_json::json!({
                        "dataset": d.display().to_string(),
                        "index": s.index,
                        "file": f.file_name().map(|n| n.to_string_lossy().into_owned()),
                    }));
                }
            }
            fs::write(run.artifacts.join("labels.json"), serde_json::to_vec_pretty(&index)?)?;
            run.write_log(&rows)?;
        }
        Verb::PrecomputeFeatures { per_image, .. } => {
            let per_image = per_image.unwrap_or(cfg.train.patches_per_image);
            let bb = RandomConvBackbone::new(&cfg.model.backbone)?;
            let id = bb.fingerprint();
            let dir = run.artifacts.join("features");
            let mut rows = Vec::new();
            for (name, field, path, salt) in [
                ("source", "data.source", &cfg.data.source, 0u64),
                ("target", "data.target", &cfg.data.target, 0x7A56),
            ] {
                let samples = read_dataset(&ExperimentConfig::existing(field, path)?, ex)?;
                let store = embed_dataset(name, &samples, per_image, &bb, &id, cfg.seed ^ salt, ex)?;
                store.write(&dir, name)?;
                rows.push((name, format!("{} patches", store.len())));
            }
            run.write_log(&rows)?;
        }
        Verb::MatchPatches { threshold, .. } => {
            let dir = ExperimentConfig::existing("data.features", &cfg.data.features)?;
            let t = threshold.unwrap_or(cfg.train.match_threshold);
            let syn = EmbeddingStore::read(&dir, "source")?;
            let real = EmbeddingStore::read(&dir, "target")?;
            let table = MatchTable::centered(&syn.rows(), &real.rows(), t, ex)?;
            fs::write(run.artifacts.join("matches.json"), serde_json::to_vec(&table)?)?;
            let matched = table.matched_count();
            println!("{matched} of {} synthetic patches matched at threshold {t}", syn.len());
            run.write_log(&[("threshold", t.to_string()), ("matched", matched.to_string()), ("skipped", (syn.len() - matched).to_string())])?;
        }
        Verb::Train { resume, .. } => {
            let src = read_dataset(&ExperimentConfig::existing("data.source", &cfg.data.source)?, ex)?;
            let tgt = read_dataset(&ExperimentConfig::existing("data.target", &cfg.data.target)?, ex)?;
            let p = provider(&cfg)?;
            let data = TrainData::new(src, tgt, p.as_ref())?;
            let bb = RandomConvBackbone::new(&cfg.model.backbone)?;
            let policy = cfg.condition.variant().policy.unwrap_or(cfg.train.policy);
            let source = match (&cfg.data.features, policy) {
                (Some(dir), gbuf_enhance::sampler::SamplingPolicy::Matched) => {
                    let syn = EmbeddingStore::read(dir, "source")?;
                    let real = EmbeddingStore::read(dir, "target")?;
                    PatchSource::from_stores(&syn, &real, cfg.train.match_threshold, ex)?
                }
                _ => PatchSource::build(&cfg.train, cfg.condition, &data, &bb, cfg.seed, ex)?,
            };
            let mut trainer = Trainer::with_source(cfg.train.clone(), cfg.model.clone(), cfg.condition, data, source, cfg.seed, ex)?;
            if let Some(ckpt) = resume {
                trainer.load_checkpoint(ckpt)?;
            }
            let mut log = LossLog::create(&run.log_path())?;
            trainer.train(cfg.train.total_iters, Some(&mut log), Some(&run.artifacts))?;
            trainer.save_checkpoint(&run.artifacts.join("final.gbck"))?;
        }
        Verb::Enhance { checkpoint, dataset, .. } => {
            let dir = dataset_dir("data.source", dataset.as_ref(), &cfg.data.source)?;
            let bytes = fs::read(checkpoint).map_err(|e| CliError::Config(format!("--checkpoint {}: {e}", checkpoint.display())))?;
            let (gen, store, condition) = generator_from_checkpoint(&bytes)?;
            let samples = read_dataset(&dir, ex)?;
            let enhanced = ex.try_map(samples.len(), |i| {
                let mut s = samples[i].clone();
                s.image = gen.enhance(&store, &s.image, &s.gbuffers)?;
                Ok::<_, Error>(s)
            })?;
            let out = run.artifacts.join("enhanced");
            write_dataset(&enhanced, &out, ex)?;
            let png = run.artifacts.join("png");
            fs::create_dir_all(&png)?;
            for s in &enhanced {
                save_png(&s.image, &png.join(format!("{:06}.png", s.index)))?;
            }
            run.write_log(&[("condition", condition.to_string()), ("images", enhanced.len().to_string())])?;
        }
        Verb::Evaluate { a, b, .. } => {
            let da = dataset_dir("data.source", a.as_ref(), &cfg.data.source)?;
            let db = dataset_dir("data.target", b.as_ref(), &cfg.data.target)?;
            let sa = read_dataset(&da, ex)?;
            let sb = read_dataset(&db, ex)?;
            let p = provider(&cfg)?;
            let (la, lb) = (label_maps(&sa, p.as_ref())?, label_maps(&sb, p.as_ref())?);
            let bb = RandomConvBackbone::new(&cfg.metrics.backbone)?;
            let images = |s: &[SceneSample]| s.iter().map(|x| x.image.clone()).collect::<Vec<_>>();
            let mut reports = vec![kid(&image_features(&images(&sa), &bb, ex)?, &image_features(&images(&sb), &bb, ex)?, &cfg.metrics.kid, ex)?];
            let pa: Vec<LabeledImage> = sa.iter().zip(&la).map(|(s, l)| LabeledImage { image: &s.image, labels: l }).collect();
            let pb: Vec<LabeledImage> = sb.iter().zip(&lb).map(|(s, l)| LabeledImage { image: &s.image, labels: l }).collect();
            let taps: Vec<usize> = cfg.metrics.taps.iter().map(|t| t - 1).collect();
            reports.extend(skvd(&pa, &pb, &bb, &taps, &cfg.metrics.skvd, ex)?);
            let report = Report {
                a: da.display().to_string(),
                b: db.display().to_string(),
                seed: cfg.seed,
                kid: &cfg.metrics.kid,
                skvd: &cfg.metrics.skvd,
                metrics: &reports,
            };
            let json = serde_json::to_string_pretty(&report)?;
            fs::write(run.artifacts.join("report.json"), &json)?;
            let mut w = csv::Writer::from_path(run.artifacts.join("report.csv"))?;
            w.write_record(["metric", "value", "std", "subset_size", "n_subsets", "retained"])?;
            for r in &reports {
                w.write_record([
                    r.name.clone(),
                    r.value.to_string(),
                    r.std.to_string(),
                    r.subset_size.to_string(),
                    r.n_subsets.to_string(),
                    r.retained.map_or_else(String::new, |v| v.to_string()),
                ])?;
            }
            w.flush()?;
            println!("{json}");
            run.write_log(&reports.iter().map(|r| ("metric", format!("{} {} {}", r.name, r.value, r.std))).collect::<Vec<_>>())?;
        }
        Verb::LayoutStats { dataset, .. } => {
            let dirs = if dataset.is_empty() {
                vec![
                    ExperimentConfig::existing("data.source", &cfg.data.source)?,
                    ExperimentConfig::existing("data.target", &cfg.data.target)?,
                ]
            } else {
                dataset.iter().map(|d| dataset_dir("--dataset", Some(d), &None)).collect::<CliResult<_>>()?
            };
            let p = provider(&cfg)?;
            let [gh, gw] = cfg.metrics.density_grid;
            let mut rows = Vec::new();
            for (k, d) in dirs.iter().enumerate() {
                let samples = read_dataset(d, ex)?;
                let maps = samples
                    .iter()
                    .map(|s| {
                        let (h, w) = s.hw();
                        Ok(LabelMap::new(h, w, p.labels(s)?)?)
                    })
                    .collect::<Result<Vec<_>, Error>>()?;
                let dens = layout_density(&maps, NUM_CLASSES, gh, gw)?;
                let name = d.file_name().map_or_else(|| format!("dataset{k}"), |n| n.to_string_lossy().into_owned());
                let out = run.artifacts.join(format!("{k}-{name}"));
                let pngs = dens.write_pngs(&out, "density")?;
                fs::write(out.join("density.json"), serde_json::to_vec(&dens)?)?;
                rows.push(("dataset", format!("{} -> {} maps", d.display(), pngs.len())));
            }
            run.write_log(&rows)?;
        }
    }
    Ok(run.root)
}
