//! Command-line driver: `mine`, `offset`, `generate`, `eval` and `gradcheck`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::action_offset::{scene_offset_groups, ActionCluster, OffsetLabel, SkippedOffset};
use crate::config::{Config, LlmModeConfig};
use crate::dataset::{export_augmented, parse_scene_file, PromptScene};
use crate::error::{Error, Result};
use crate::implicit_mining::{mine_implicit, LlmClient, LlmMode, MockRules};
use crate::metrics::{fid, gaussian_stats, kid, load_features, KidReport, MetricReport};
use crate::pipeline::{generate, write_bundle, Components};
use crate::verify::{gradient_suite, GRAD_TOL};

#[derive(Debug, Parser)]
#[command(name = "ceidm", version, about = "Interaction-conditioned toy diffusion: mining, offsets, sampling, metrics")]
struct Cli {
    /// JSON config file; missing keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Root seed; overrides the config file.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Worker threads for per-scene work and metric kernels.
    #[arg(long, global = true, value_name = "N", value_parser = clap::value_parser!(u16).range(1..))]
    jobs: Option<u16>,
    /// Answer mining prompts from the bundled rule table instead of the network.
    #[arg(long, global = true)]
    mock_llm: bool,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fill in implicit triplets and write the augmented scene file.
    Mine { scenes: PathBuf },
    /// Cluster action embeddings and report each instance's offset group.
    Offset { scenes: PathBuf },
    /// Sample every scene and write one bundle directory per scene.
    Generate { scenes: PathBuf },
    /// Compare two feature files.
    Eval {
        #[command(subcommand)]
        metric: Metric,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

#[derive(Debug, Subcommand)]
enum Metric {
    Fid { a: PathBuf, b: PathBuf },
    Kid { a: PathBuf, b: PathBuf },
}

#[derive(Debug, Serialize)]
struct OffsetReport {
    seed: u64,
    scenes: Vec<SceneOffsets>,
}

#[derive(Debug, Serialize)]
struct SceneOffsets {
    index: usize,
    prompt: String,
    cluster: ActionCluster,
    instances: Vec<InstanceOffsets>,
}

#[derive(Debug, Serialize)]
struct InstanceOffsets {
    instance_index: usize,
    m: usize,
    labels: Vec<OffsetLabel>,
    skipped: Vec<SkippedOffset>,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("ceidm: error: {msg}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<i32> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.mock_llm {
        cfg.llm.mode = LlmModeConfig::Mock;
    }
    let out = cli.out.clone().or_else(|| cfg.paths.out_dir.clone());
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.jobs {
        pool = pool.num_threads(n as usize);
    }
    let pool = pool.build().map_err(|e| Error::State(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Mine { scenes } => cmd_mine(&cfg, &scenes, out.as_deref()),
        Command::Offset { scenes } => cmd_offset(&cfg, &scenes, out.as_deref()),
        Command::Generate { scenes } => cmd_generate(&cfg, &scenes, out.as_deref()),
        Command::Eval { metric } => cmd_eval(metric, out.as_deref()),
        Command::Gradcheck => cmd_gradcheck(&cfg, out.as_deref()),
    })
}

fn read_scenes(path: &Path) -> Result<Vec<PromptScene>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_scene_file(&bytes)
}

fn build_client(cfg: &Config) -> Result<Option<LlmClient>> {
    let llm = &cfg.llm;
    let client = match llm.mode {
        LlmModeConfig::Off => return Ok(None),
        LlmModeConfig::Mock => {
            let rules = match &llm.mock_rules {
                Some(p) => MockRules::load(p)?,
                None => MockRules::builtin(),
            };
            LlmClient::new(LlmMode::Mock(rules), &llm.model, Duration::from_secs_f64(llm.timeout_secs), 0)
        }
        LlmModeConfig::Http => {
            let timeout = Duration::from_secs_f64(llm.timeout_secs);
            let client = LlmClient::http_from_env(&llm.model, timeout, llm.max_retries);
            match (&llm.endpoint, client.mode()) {
                (Some(endpoint), LlmMode::Http { api_key, .. }) => {
                    let mode = LlmMode::Http { endpoint: endpoint.clone(), api_key: api_key.clone() };
                    LlmClient::new(mode, &llm.model, timeout, llm.max_retries)
                }
                _ => client,
            }
        }
    };
    if let Some(cache) = &llm.cache {
        client.load_cache(cache)?;
    }
    Ok(Some(client))
}

fn save_client_cache(cfg: &Config, client: Option<&LlmClient>) -> Result<()> {
    match (&cfg.llm.cache, client) {
        (Some(path), Some(c)) => c.save_cache(path),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `text` to `out/name`, or to stdout when no output directory is set.
fn emit(out: Option<&Path>, name: &str, text: &str) -> Result<()> {
    match out {
        Some(dir) => {
            let path = dir.join(name);
            write_text(&path, text)?;
            eprintln!("ceidm: wrote {}", path.display());
            Ok(())
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_json(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn cmd_mine(cfg: &Config, scenes_path: &Path, out: Option<&Path>) -> Result<i32> {
    let mut scenes = read_scenes(scenes_path)?;
    let client = build_client(cfg)?
        .ok_or_else(|| Error::validation("llm.mode is \"off\"; enable mining or pass --mock-llm"))?;
    let mined: Vec<Result<_>> = scenes
        .par_iter()
        .map(|s| match &s.implicit_triplets {
            Some(t) => Ok(t.clone()),
            None => mine_implicit(&client, &s.prompt).map_err(|e| e.in_stage("mining")),
        })
        .collect();
    for (i, (scene, triplets)) in scenes.iter_mut().zip(mined).enumerate() {
        scene.implicit_triplets = Some(triplets.map_err(|e| e.in_scene(i))?);
    }
    save_client_cache(cfg, Some(&client))?;
    emit(out, "scenes_augmented.json", &export_augmented(&scenes)?)?;
    Ok(0)
}

fn cmd_offset(cfg: &Config, scenes_path: &Path, out: Option<&Path>) -> Result<i32> {
    let scenes = read_scenes(scenes_path)?;
    let parts = Components::from_config(cfg)?;
    let reports: Vec<Result<SceneOffsets>> = scenes
        .par_iter()
        .enumerate()
        .map(|(index, scene)| scene_offsets(cfg, &parts, index, scene).map_err(|e| e.in_scene(index)))
        .collect();
    let scenes = reports.into_iter().collect::<Result<Vec<_>>>()?;
    emit(out, "offsets.json", &to_json(&OffsetReport { seed: cfg.seed, scenes }))?;
    Ok(0)
}

fn scene_offsets(cfg: &Config, parts: &Components, index: usize, scene: &PromptScene) -> Result<SceneOffsets> {
    let tokens = scene
        .instances
        .iter()
        .map(|i| parts.encoder.encode(i))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("embedding"))?;
    let (cluster, groups) = scene_offset_groups(scene, &tokens, &parts.encoder, &cfg.offsets, cfg.seed)
        .map_err(|e| e.in_stage("offset"))?;
    let instances = groups
        .into_iter()
        .map(|g| InstanceOffsets { instance_index: g.instance_index, m: g.m(), labels: g.labels, skipped: g.skipped })
        .collect();
    Ok(SceneOffsets { index, prompt: scene.prompt.clone(), cluster, instances })
}

fn cmd_generate(cfg: &Config, scenes_path: &Path, out: Option<&Path>) -> Result<i32> {
    let scenes = read_scenes(scenes_path)?;
    let out = out.unwrap_or(Path::new("out"));
    let parts = Components::from_config(cfg)?;
    let needs_client = scenes.iter().any(|s| s.implicit_triplets.is_none());
    let client = if needs_client { build_client(cfg)? } else { None };
    let bundles: Vec<Result<_>> =
        scenes.par_iter().map(|scene| generate(scene, cfg, &parts, client.as_ref())).collect();
    for (i, bundle) in bundles.into_iter().enumerate() {
        let bundle = bundle.map_err(|e| e.in_scene(i))?;
        let dir = out.join(format!("scene_{i:03}"));
        write_bundle(&bundle, &dir)?;
        eprintln!("ceidm: wrote {}", dir.display());
    }
    save_client_cache(cfg, client.as_ref())?;
    write_text(&out.join("config.json"), &cfg.to_json())?;
    Ok(0)
}

fn cmd_eval(metric: Metric, out: Option<&Path>) -> Result<i32> {
    let report = match metric {
        Metric::Fid { a, b } => {
            let sa = gaussian_stats(&load_features(&a)?)?;
            let sb = gaussian_stats(&load_features(&b)?)?;
            MetricReport { fid: Some(fid(&sa, &sb)?), kid: None }
        }
        Metric::Kid { a, b } => {
            let e = kid(&load_features(&a)?, &load_features(&b)?)?;
            MetricReport { fid: None, kid: Some(KidReport::from(&e)) }
        }
    };
    emit(out, "metrics.json", &to_json(&report))?;
    Ok(0)
}

fn cmd_gradcheck(cfg: &Config, out: Option<&Path>) -> Result<i32> {
    let results = gradient_suite(cfg.seed)?;
    for r in &results {
        let status = if r.passed { "ok" } else { "FAIL" };
        println!("{status:4} {:28} inputs={:5} max_rel_error={:.3e}", r.name, r.inputs, r.max_rel_error);
    }
    if let Some(dir) = out {
        let path = dir.join("gradcheck.json");
        write_text(&path, &to_json(&results))?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        eprintln!("ceidm: error: {failed} gradient check(s) exceeded tolerance {GRAD_TOL:e}");
        return Ok(2);
    }
    Ok(0)
}
