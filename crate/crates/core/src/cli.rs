//! `sane` command-line front end: `decompose`, `edit`, `eval`, `bench` and
//! `replay`. Settings come from a TOML file (see [`crate::config`]); flags
//! override it. Every output lands under `--out` with a fixed file name.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::denoiser::{load_backend, CountingBackend};
use crate::evaluation::{
    diversity, evaluate_sample, heatmap_image, mean_pixel_difference, tifa_pairs, DistanceProvider, EmbeddingProvider,
    FixtureEmbeddings, MeanAbsolutePixelDistance, MetricReport, SampleMetrics,
};
use crate::pipeline::{
    estimate_cost, replay_manifest, run_edit, EditConfig, EditManifest, EditStrategy, ImageRef, ReplayReport,
};
use crate::specifier::{
    AmbiguousInstruction, CaptionPair, FixtureProvider, InstructionSpecifier, LlmProvider, PromptCache,
    SpecificInstructionSet,
};

pub const EDITED_PNG: &str = "edited.png";
pub const MANIFEST_JSON: &str = "manifest.json";
pub const DECOMPOSITION_JSON: &str = "decomposition.json";
pub const TIFA_JSON: &str = "tifa_pairs.json";
pub const METRICS_JSON: &str = "metrics.json";
pub const DIVERSITY_JSON: &str = "diversity.json";
pub const HEATMAP_PNG: &str = "heatmap.png";
pub const BENCH_JSON: &str = "bench.json";
pub const BENCH_CSV: &str = "bench.csv";

#[derive(Debug, Parser)]
#[command(name = "sane", version, about = "Edit images from ambiguous instructions")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn an ambiguous instruction into specific ones.
    Decompose(DecomposeArgs),
    /// Run an edit and write the image and its manifest.
    Edit(EditArgs),
    /// Compute embedding metrics for edits.
    Eval(EvalArgs),
    /// Measure denoiser calls and wall-clock time against N.
    Bench(BenchArgs),
    /// Re-run a mock-backend manifest and compare output and call counts.
    Replay(ReplayArgs),
}

/// Flags that override the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Number of specific instructions.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub strategy: Option<EditStrategy>,
    /// Backend id (`mock`, `ip2p`, `magicbrush`, `hqedit`).
    #[arg(long)]
    pub backend: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub w_image: Option<f32>,
    #[arg(long)]
    pub w_text: Option<f32>,
    #[arg(long)]
    pub w_specific: Option<f32>,
    /// Working resolution as WIDTHxHEIGHT.
    #[arg(long, value_parser = parse_size)]
    pub size: Option<(u32, u32)>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(n) = self.n {
            cfg.edit.n = n;
        }
        if let Some(s) = self.seed {
            cfg.edit.seed = s;
        }
        if let Some(s) = self.strategy {
            cfg.edit.strategy = s;
        }
        if let Some(b) = &self.backend {
            cfg.backend.id = b.clone();
        }
        if let Some(s) = self.steps {
            cfg.sampler.steps = s;
        }
        if let Some(w) = self.w_image {
            cfg.weights.w_image = w;
        }
        if let Some(w) = self.w_text {
            cfg.weights.w_text = w;
        }
        if let Some(w) = self.w_specific {
            cfg.weights.w_specific = Some(w);
        }
        if let Some((w, h)) = self.size {
            cfg.edit.width = w;
            cfg.edit.height = h;
        }
    }
}

fn parse_size(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WIDTHxHEIGHT, got '{s}'"))?;
    let parse = |v: &str| v.trim().parse::<u32>().map_err(|e| format!("'{v}': {e}"));
    Ok((parse(w)?, parse(h)?))
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub instruction: String,
    /// Number of specific instructions (at least 1).
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: Option<u64>,
    /// Caption of the input image; generated by the LLM when omitted.
    #[arg(long)]
    pub caption: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    /// Input image; repeat for several.
    #[arg(long, required = true)]
    pub image: Vec<PathBuf>,
    #[arg(long)]
    pub instruction: String,
    /// Specific instruction to use instead of asking the LLM; repeatable.
    #[arg(long = "specific")]
    pub specifics: Vec<String>,
    #[arg(long)]
    pub caption: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Parallel edits when several images are given.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Store the full selection mask of every step in the manifest.
    #[arg(long)]
    pub dump_masks: bool,
    /// Issue each step's conditional calls as one batch.
    #[arg(long)]
    pub batched: bool,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Edit manifest; repeatable.
    #[arg(long)]
    pub manifest: Vec<PathBuf>,
    /// Directory searched for `manifest.json` files (one level deep).
    #[arg(long)]
    pub batch: Option<PathBuf>,
    /// Input image, for evaluating an explicit pair or sample set.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub edited: Option<PathBuf>,
    #[arg(long)]
    pub initial_caption: Option<String>,
    #[arg(long)]
    pub final_caption: Option<String>,
    /// Instruction, needed when captions have to be generated.
    #[arg(long)]
    pub instruction: Option<String>,
    /// Edits of `--image` for diversity and the difference heatmap.
    #[arg(long)]
    pub samples: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 0)]
    pub n_min: usize,
    #[arg(long, default_value_t = 3)]
    pub n_max: usize,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Input image; defaults to the path recorded in the manifest.
    #[arg(long)]
    pub image: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load_or_default(cli.config.as_deref())?;
    match cli.command {
        Command::Decompose(a) => cmd_decompose(cfg, a),
        Command::Edit(a) => cmd_edit(cfg, a),
        Command::Eval(a) => cmd_eval(cfg, a),
        Command::Bench(a) => cmd_bench(cfg, a),
        Command::Replay(a) => cmd_replay(a),
    }
}

/// Files are written into a hidden sibling directory first and moved under
/// `out` only once every file of the command exists.
struct Staging {
    dir: tempfile::TempDir,
    out: PathBuf,
}

impl Staging {
    fn new(out: &Path) -> Result<Self> {
        let parent = out
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        let dir = tempfile::Builder::new()
            .prefix(".sane-staging")
            .tempdir_in(parent)
            .with_context(|| format!("creating staging directory in {}", parent.display()))?;
        Ok(Self {
            dir,
            out: out.to_path_buf(),
        })
    }

    fn path(&self, rel: impl AsRef<Path>) -> Result<PathBuf> {
        let p = self.dir.path().join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    fn write_json<T: Serialize>(&self, rel: impl AsRef<Path>, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.path(rel)?, text)?;
        Ok(())
    }

    fn commit(self) -> Result<PathBuf> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        for entry in fs::read_dir(self.dir.path())? {
            let entry = entry?;
            let target = self.out.join(entry.file_name());
            if entry.file_type()?.is_dir() && target.is_dir() {
                fs::remove_dir_all(&target)?;
            }
            fs::rename(entry.path(), &target).with_context(|| format!("moving output to {}", target.display()))?;
        }
        Ok(self.out)
    }
}

fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .with_context(|| format!("reading image {}", path.display()))?
        .to_rgb8())
}

pub fn build_provider(cfg: &RunConfig) -> Result<Arc<dyn LlmProvider>> {
    match cfg.llm.provider.as_str() {
        "fixture" => {
            let path = cfg
                .llm
                .fixtures
                .as_ref()
                .context("llm provider 'fixture' needs `fixtures = \"<file>\"` in [llm]")?;
            Ok(Arc::new(FixtureProvider::from_file(path)?))
        }
        #[cfg(feature = "openai")]
        "openai" => Ok(Arc::new(crate::specifier::provider::OpenAiProvider::from_env(
            cfg.llm.model.clone(),
            cfg.llm.base_url.clone(),
            cfg.llm.temperature,
        )?)),
        other => bail!("unknown llm provider '{other}'"),
    }
}

pub fn build_specifier(cfg: &RunConfig) -> Result<InstructionSpecifier> {
    let provider = build_provider(cfg)?;
    let cache = PromptCache::open(&cfg.llm.cache_dir)
        .with_context(|| format!("opening llm cache in {}", cfg.llm.cache_dir.display()))?;
    let mut spec = InstructionSpecifier::new(provider, Arc::new(cache));
    spec.max_n = cfg.edit.max_n;
    spec.max_retries = cfg.llm.max_retries;
    spec.caption_max_words = cfg.llm.caption_max_words;
    Ok(spec)
}

/// Record written by `decompose`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecompositionRecord {
    pub image: ImageRef,
    pub instruction: String,
    pub caption: String,
    pub n: usize,
    pub instructions: Vec<String>,
    /// The full `max_n` set the prefix was taken from.
    pub set: SpecificInstructionSet,
    pub cached: bool,
}

fn caption_for(
    spec: &InstructionSpecifier,
    explicit: Option<&str>,
    cfg: &RunConfig,
    c: &AmbiguousInstruction,
    image: &RgbImage,
) -> Result<(String, Option<CaptionPair>)> {
    if let Some(cap) = explicit.or(cfg.edit.caption.as_deref()) {
        return Ok((cap.to_string(), None));
    }
    let pair = spec.caption_pair(c, image).context("captioning the input image")?;
    Ok((pair.initial.clone(), Some(pair)))
}

fn cmd_decompose(mut cfg: RunConfig, args: DecomposeArgs) -> Result<()> {
    if let Some(n) = args.n {
        cfg.edit.n = n as usize;
    }
    let n = cfg.edit.n;
    if n == 0 {
        bail!("--n must be at least 1");
    }
    let image = load_rgb(&args.image)?;
    let c = AmbiguousInstruction::new(args.instruction)?;
    let spec = build_specifier(&cfg)?;
    let (caption, _) = caption_for(&spec, args.caption.as_deref(), &cfg, &c, &image)?;
    let (set, cached) = spec.decompose_traced(&caption, &c, cfg.edit.max_n.max(n))?;
    let chosen = set.prefix(n)?;
    for s in chosen.instructions() {
        println!("{s}");
    }
    if let Some(out) = &args.out {
        let staging = Staging::new(out)?;
        staging.write_json(
            DECOMPOSITION_JSON,
            &DecompositionRecord {
                image: ImageRef::of(&image, Some(&args.image)),
                instruction: c.as_str().to_string(),
                caption,
                n,
                instructions: chosen.instructions().to_vec(),
                set,
                cached,
            },
        )?;
        staging.commit()?;
    }
    Ok(())
}

struct EditJob<'a> {
    path: &'a Path,
    rel: PathBuf,
}

fn cmd_edit(mut cfg: RunConfig, args: EditArgs) -> Result<()> {
    args.overrides.apply(&mut cfg);
    cfg.edit.dump_masks |= args.dump_masks;
    cfg.edit.batched |= args.batched;
    let strategy = cfg.edit.strategy;
    let edit_cfg = cfg.edit_config();
    edit_cfg.validate(strategy)?;
    let backend = load_backend(&cfg.backend).context("loading the editing backend")?;
    let c = AmbiguousInstruction::new(args.instruction.clone())?;

    let wants_specifics = strategy.requires_specifics() || strategy == EditStrategy::PromptConcat;
    let manual = if args.specifics.is_empty() {
        None
    } else {
        Some(SpecificInstructionSet::manual(args.specifics.clone())?)
    };
    let specifier = if wants_specifics && manual.is_none() && edit_cfg.n_specific > 0 {
        Some(build_specifier(&cfg)?)
    } else {
        None
    };

    let jobs: Vec<EditJob> = if args.image.len() == 1 {
        vec![EditJob {
            path: &args.image[0],
            rel: PathBuf::new(),
        }]
    } else {
        args.image
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let stem = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                EditJob {
                    path: p,
                    rel: PathBuf::from(format!("{i:03}-{stem}")),
                }
            })
            .collect()
    };

    let staging = Staging::new(&args.out)?;
    let run_job = |job: &EditJob| -> Result<PathBuf> {
        let image = load_rgb(job.path)?;
        let mut captions = None;
        let specifics = match (&manual, &specifier) {
            (Some(m), _) => Some(m.clone()),
            (None, Some(spec)) => {
                let (caption, pair) = caption_for(spec, args.caption.as_deref(), &cfg, &c, &image)?;
                captions = pair;
                Some(spec.decompose(&caption, &c, cfg.edit.max_n)?)
            }
            (None, None) => None,
        };
        let outcome = run_edit(&image, &c, specifics.as_ref(), &edit_cfg, strategy, backend.as_ref())
            .with_context(|| format!("editing {}", job.path.display()))?;
        let mut manifest = outcome.manifest;
        let png = job.rel.join(EDITED_PNG);
        manifest.input.path = Some(fs::canonicalize(job.path)?.display().to_string());
        manifest.output.path = Some(EDITED_PNG.to_string());
        manifest.captions = captions;
        outcome
            .image
            .save(staging.path(&png)?)
            .with_context(|| format!("writing {}", png.display()))?;
        manifest.write_atomic(&staging.path(job.rel.join(MANIFEST_JSON))?)?;
        if !manifest.instructions_used.is_empty() {
            staging.write_json(
                job.rel.join(TIFA_JSON),
                &tifa_pairs(EDITED_PNG, &manifest.instructions_used),
            )?;
        }
        Ok(job.rel.join(MANIFEST_JSON))
    };

    let workers = args.workers.clamp(1, jobs.len());
    let results: Vec<Mutex<Option<Result<PathBuf>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                let r = run_job(job);
                *results[i].lock().expect("result slot poisoned") = Some(r);
            });
        }
    });
    let mut written = Vec::new();
    for slot in results {
        written.push(
            slot.into_inner()
                .expect("result slot poisoned")
                .expect("every job ran")?,
        );
    }
    let out = staging.commit()?;
    for rel in written {
        println!("{}", out.join(rel).display());
    }
    Ok(())
}

fn build_embeddings(cfg: &RunConfig) -> Result<Box<dyn EmbeddingProvider>> {
    if cfg.eval.embeddings == "fixture" {
        Ok(Box::new(FixtureEmbeddings::new(cfg.eval.dim)))
    } else {
        Ok(Box::new(FixtureEmbeddings::from_file(Path::new(&cfg.eval.embeddings))?))
    }
}

fn resolve_beside(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn batch_manifests(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let top = dir.join(MANIFEST_JSON);
    if top.is_file() {
        found.push(top);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    found.extend(
        subdirs
            .into_iter()
            .map(|d| d.join(MANIFEST_JSON))
            .filter(|p| p.is_file()),
    );
    if found.is_empty() {
        bail!("no {MANIFEST_JSON} found under {}", dir.display());
    }
    Ok(found)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiversityRecord {
    pub provider: String,
    pub samples: usize,
    pub diversity: f64,
    pub heatmap: String,
}

fn cmd_eval(cfg: RunConfig, args: EvalArgs) -> Result<()> {
    let embeddings = build_embeddings(&cfg)?;
    let mut specifier = None;
    let mut captions_for = |c: Option<&str>, input: &RgbImage, given: Option<CaptionPair>| -> Result<CaptionPair> {
        if let Some(pair) = given {
            return Ok(pair);
        }
        if let (Some(i), Some(f)) = (&args.initial_caption, &args.final_caption) {
            return Ok(CaptionPair {
                initial: i.clone(),
                final_caption: f.clone(),
            });
        }
        let c = c.context("captions missing: pass --initial-caption/--final-caption or an instruction")?;
        if specifier.is_none() {
            specifier = Some(build_specifier(&cfg)?);
        }
        let spec = specifier.as_ref().expect("set above");
        Ok(spec.caption_pair(&AmbiguousInstruction::new(c)?, input)?)
    };

    let mut manifests = args.manifest.clone();
    if let Some(dir) = &args.batch {
        manifests.extend(batch_manifests(dir)?);
    }
    let mut samples: Vec<SampleMetrics> = Vec::new();
    for path in &manifests {
        let m = EditManifest::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let input_path = m
            .input
            .path
            .as_deref()
            .context("manifest does not record the input path")?;
        let output_path = m.output.path.as_deref().unwrap_or(EDITED_PNG);
        let input = load_rgb(&resolve_beside(base, input_path))?;
        let edited = load_rgb(&resolve_beside(base, output_path))?;
        let instr = args.instruction.as_deref().unwrap_or(&m.instruction);
        let pair = captions_for(Some(instr), &input, m.captions.clone())?;
        samples.push(evaluate_sample(
            embeddings.as_ref(),
            path.display().to_string(),
            &input,
            &edited,
            &pair,
        )?);
    }
    if let (Some(img), Some(ed)) = (&args.image, &args.edited) {
        let input = load_rgb(img)?;
        let edited = load_rgb(ed)?;
        let pair = captions_for(args.instruction.as_deref(), &input, None)?;
        samples.push(evaluate_sample(
            embeddings.as_ref(),
            ed.display().to_string(),
            &input,
            &edited,
            &pair,
        )?);
    }

    let staging = Staging::new(&args.out)?;
    let mut wrote = false;
    if !samples.is_empty() {
        let report = MetricReport::from_samples(embeddings.id(), samples);
        println!("{}", serde_json::to_string_pretty(&report)?);
        staging.write_json(METRICS_JSON, &report)?;
        wrote = true;
    }
    if !args.samples.is_empty() {
        let input = load_rgb(args.image.as_deref().context("--samples needs --image")?)?;
        let edits = args.samples.iter().map(|p| load_rgb(p)).collect::<Result<Vec<_>>>()?;
        let distance = MeanAbsolutePixelDistance;
        let record = DiversityRecord {
            provider: distance.id().to_string(),
            samples: edits.len(),
            diversity: diversity(&edits, &input, &distance)?,
            heatmap: HEATMAP_PNG.to_string(),
        };
        heatmap_image(&mean_pixel_difference(&input, &edits)?).save(staging.path(HEATMAP_PNG)?)?;
        println!("{}", serde_json::to_string_pretty(&record)?);
        staging.write_json(DIVERSITY_JSON, &record)?;
        wrote = true;
    }
    if !wrote {
        bail!("nothing to evaluate: pass --manifest, --batch, --image with --edited, or --image with --samples");
    }
    staging.commit()?;
    Ok(())
}

/// One row of the cost table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub strategy: EditStrategy,
    pub n: usize,
    pub steps: usize,
    pub calls: usize,
    pub expected_calls: usize,
    pub wall_ms_median: f64,
    pub wall_ms_min: f64,
}

pub fn bench_rows(cfg: &RunConfig, n_min: usize, n_max: usize, repeats: usize) -> Result<Vec<BenchRow>> {
    if n_min > n_max {
        bail!("--n-min {n_min} exceeds --n-max {n_max}");
    }
    let backend = CountingBackend::new(load_backend(&cfg.backend).context("loading the editing backend")?);
    let (w, h) = (cfg.edit.width, cfg.edit.height);
    let image = RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 7 % 256) as u8, (y * 5 % 256) as u8, 96]));
    let c = AmbiguousInstruction::new("make it look festive")?;
    let pool: Vec<String> = (0..n_max)
        .map(|i| format!("add festive detail number {}", i + 1))
        .collect();
    let mut rows = Vec::new();
    for n in n_min..=n_max {
        let strategy = if n == 0 {
            EditStrategy::Baseline
        } else {
            cfg.edit.strategy
        };
        let edit_cfg = EditConfig {
            n_specific: n,
            max_specific: n_max.max(1),
            ..cfg.edit_config()
        };
        let set = (n > 0)
            .then(|| SpecificInstructionSet::manual(pool.clone()))
            .transpose()?;
        let mut times = Vec::with_capacity(repeats.max(1));
        let mut calls = 0;
        for _ in 0..repeats.max(1) {
            backend.reset();
            let started = Instant::now();
            run_edit(&image, &c, set.as_ref(), &edit_cfg, strategy, &backend)?;
            times.push(started.elapsed().as_secs_f64() * 1e3);
            calls = backend.calls();
        }
        times.sort_by(f64::total_cmp);
        rows.push(BenchRow {
            strategy,
            n,
            steps: edit_cfg.steps,
            calls,
            expected_calls: estimate_cost(strategy, n, edit_cfg.steps),
            wall_ms_median: times[times.len() / 2],
            wall_ms_min: times[0],
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("strategy,n,steps,calls,expected_calls,wall_ms_median,wall_ms_min\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{:.3},{:.3}\n",
            r.strategy, r.n, r.steps, r.calls, r.expected_calls, r.wall_ms_median, r.wall_ms_min
        ));
    }
    s
}

fn cmd_bench(mut cfg: RunConfig, args: BenchArgs) -> Result<()> {
    args.overrides.apply(&mut cfg);
    let rows = bench_rows(&cfg, args.n_min, args.n_max, args.repeats)?;
    print!("{}", bench_csv(&rows));
    if let Some(bad) = rows.iter().find(|r| r.calls != r.expected_calls) {
        bail!(
            "N={} made {} denoiser calls, expected {}",
            bad.n,
            bad.calls,
            bad.expected_calls
        );
    }
    if let Some(out) = &args.out {
        let staging = Staging::new(out)?;
        staging.write_json(BENCH_JSON, &rows)?;
        fs::write(staging.path(BENCH_CSV)?, bench_csv(&rows))?;
        staging.commit()?;
    }
    Ok(())
}

fn cmd_replay(args: ReplayArgs) -> Result<()> {
    let manifest = EditManifest::load(&args.manifest)?;
    let base = args.manifest.parent().unwrap_or(Path::new("."));
    let input_path = match &args.image {
        Some(p) => p.clone(),
        None => resolve_beside(
            base,
            manifest
                .input
                .path
                .as_deref()
                .context("manifest does not record the input path; pass --image")?,
        ),
    };
    let report: ReplayReport = replay_manifest(&manifest, &load_rgb(&input_path)?)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if !report.matches() {
        bail!("replay diverged from the recorded run");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_parsing() {
        assert_eq!(parse_size("64x32").unwrap(), (64, 32));
        assert_eq!(parse_size("8X8").unwrap(), (8, 8));
        assert!(parse_size("64").is_err());
        assert!(parse_size("ax8").is_err());
    }

    #[test]
    fn overrides_win_over_config() {
        let mut cfg = RunConfig::from_toml("[edit]\nn = 1\nseed = 4\n[weights]\nw_specific = 2.0").unwrap();
        Overrides {
            n: Some(3),
            w_specific: Some(9.0),
            strategy: Some(EditStrategy::Composable),
            ..Overrides::default()
        }
        .apply(&mut cfg);
        assert_eq!(cfg.edit.n, 3);
        assert_eq!(cfg.edit.seed, 4);
        assert_eq!(cfg.weights.resolve().w_specific, 9.0);
        assert_eq!(cfg.edit.strategy, EditStrategy::Composable);
    }

    #[test]
    fn bench_counts_match_estimate() {
        let mut cfg = RunConfig::default();
        cfg.edit.width = 16;
        cfg.edit.height = 16;
        cfg.backend.downscale = 4;
        cfg.sampler.steps = 3;
        let rows = bench_rows(&cfg, 0, 3, 1).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].strategy, EditStrategy::Baseline);
        assert!(rows.iter().all(|r| r.calls == r.expected_calls));
        assert_eq!(rows[3].calls, 3 * 6);
        assert!(bench_csv(&rows).lines().count() == 5);
    }
}
