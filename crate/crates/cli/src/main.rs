use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use parking_lot::RwLock;
use ringwatch_core::attribute::{AttributeSchema, UserId};
use ringwatch_core::cc::{alternating_cc, union_find_cc, EdgeSet, DEFAULT_MAX_ROUNDS};
use ringwatch_core::classifier::{EdgeClassifier, ForestParams};
use ringwatch_service::service::IngestError;
use ringwatch_service::{Service, ServiceConfig};
use ringwatch_synth::bench::{self, ApproachConfig, CcScaleConfig};
use ringwatch_synth::detect::run_detection;
use ringwatch_synth::evaluate::{evaluate, DEFAULT_PURITY};
use ringwatch_synth::generate::{read_events, write_events};
use ringwatch_synth::training::{bootstrap_model, training_spec, SampleParams};
use ringwatch_synth::{generate, GroundTruth, PopulationSpec};

#[derive(Parser)]
#[command(name = "ringwatch", version, about = "Multiple-account ring detection")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Register events from an NDJSON file, printing `ack <seq> <user>` once
    /// each is durable.
    Ingest {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the bootstrap edge classifier on a generated population.
    Train {
        /// Population spec; defaults to a 20k-user training population.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 4242)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        trees: usize,
        #[arg(long, default_value_t = 0.8)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    Cc {
        #[command(subcommand)]
        cmd: CcCmd,
    },
    Detector {
        #[command(subcommand)]
        cmd: DetectorCmd,
    },
    Synth {
        #[command(subcommand)]
        cmd: SynthCmd,
    },
    Bench {
        #[command(subcommand)]
        cmd: BenchCmd,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Engine {
    Alternating,
    UnionFind,
}

#[derive(Subcommand)]
enum CcCmd {
    /// Label every node of a `lo<TAB>hi` edge list with its component minimum.
    Run {
        #[arg(long)]
        edges: PathBuf,
        #[arg(long, value_enum, default_value = "alternating")]
        engine: Engine,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum DetectorCmd {
    /// Run an event file through an in-memory service and summarize.
    Replay {
        #[arg(long)]
        events: PathBuf,
        /// Ground truth TSV; adds precision and recall to the summary.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_PURITY)]
        purity: f64,
    },
}

#[derive(Subcommand)]
enum SynthCmd {
    Generate {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out_events: PathBuf,
        #[arg(long)]
        out_truth: PathBuf,
    },
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Per-event latency of traversal, full recompute, and the cache.
    Approaches {
        /// TOML overriding the benchmark defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Alternating-CC runtime against edge and node counts.
    Cc {
        #[arg(long, value_delimiter = ',', default_value = "1e4,1e5,1e6")]
        edges: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "1e4,1e5,1e6")]
        nodes: Vec<String>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(io::stderr)
        .init();
    match Cli::parse().cmd {
        Cmd::Serve { config } => serve(load_config(config.as_deref())?),
        Cmd::Ingest {
            events,
            data_dir,
            config,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if data_dir.is_some() {
                cfg.data_dir = data_dir;
            }
            ingest(cfg, &events)
        }
        Cmd::Train {
            spec,
            seed,
            trees,
            threshold,
            out,
        } => {
            let spec = match spec {
                Some(p) => PopulationSpec::load(&p)?,
                None => training_spec(seed),
            };
            let forest = ForestParams {
                trees,
                seed,
                ..ForestParams::default()
            };
            let schema = AttributeSchema::default_schema();
            let model = bootstrap_model(&spec, &schema, &SampleParams::default(), &forest, threshold)?;
            model.save(&out)?;
            eprintln!("wrote {} ({})", out.display(), model.model_id());
            Ok(())
        }
        Cmd::Cc {
            cmd: CcCmd::Run { edges, engine, out },
        } => cc_run(&edges, engine, out.as_deref()),
        Cmd::Detector {
            cmd:
                DetectorCmd::Replay {
                    events,
                    truth,
                    config,
                    purity,
                },
        } => replay(&events, truth.as_deref(), load_config(config.as_deref())?, purity),
        Cmd::Synth {
            cmd:
                SynthCmd::Generate {
                    spec,
                    out_events,
                    out_truth,
                },
        } => {
            let spec = match spec {
                Some(p) => PopulationSpec::load(&p)?,
                None => PopulationSpec::default(),
            };
            let pop = generate(&spec)?;
            let mut w = BufWriter::new(File::create(&out_events)?);
            write_events(&pop.events, &mut w)?;
            w.flush()?;
            let mut w = BufWriter::new(File::create(&out_truth)?);
            pop.truth.write_tsv(&mut w)?;
            w.flush()?;
            eprintln!("{} events, {} rings", pop.events.len(), pop.truth.ring_members().len());
            Ok(())
        }
        Cmd::Bench {
            cmd: BenchCmd::Approaches { spec, out },
        } => {
            let cfg: ApproachConfig = match spec {
                Some(p) => toml::from_str(&std::fs::read_to_string(&p)?)?,
                None => ApproachConfig::default(),
            };
            let rows = bench::bench_approaches(&cfg)?;
            bench::write_csv(&rows, File::create(&out)?)?;
            bench::write_csv(&rows, io::stdout())?;
            Ok(())
        }
        Cmd::Bench {
            cmd:
                BenchCmd::Cc {
                    edges,
                    nodes,
                    repeats,
                    out,
                },
        } => {
            let cfg = CcScaleConfig {
                edge_counts: edges.iter().map(|s| parse_count(s)).collect::<Result<_>>()?,
                node_counts: nodes.iter().map(|s| parse_count(s)).collect::<Result<_>>()?,
                repeats,
                ..CcScaleConfig::default()
            };
            let rows = bench::bench_cc_scale(&cfg)?;
            bench::write_csv(&rows, File::create(&out)?)?;
            bench::write_csv(&rows, io::stdout())?;
            let (xs, ys): (Vec<f64>, Vec<f64>) = rows
                .iter()
                .filter(|r| r.sweep == "edges")
                .map(|r| (r.edges as f64, r.seconds))
                .unzip();
            if let Some(fit) = bench::linear_fit(&xs, &ys) {
                eprintln!("edges fit: slope {:.3e} s/edge, r2 {:.4}", fit.slope, fit.r2);
            }
            Ok(())
        }
    }
}

/// Accepts plain integers and forms like `1e5`.
fn parse_count(s: &str) -> Result<usize> {
    let s = s.trim();
    if let Ok(n) = s.parse::<usize>() {
        return Ok(n);
    }
    let f: f64 = s.parse().with_context(|| format!("not a count: {s:?}"))?;
    if f < 0.0 || f.fract() != 0.0 {
        bail!("not a count: {s:?}");
    }
    Ok(f as usize)
}

fn load_config(path: Option<&Path>) -> Result<ServiceConfig> {
    Ok(match path {
        Some(p) => ServiceConfig::load(p)?,
        None => ServiceConfig::from_env()?,
    })
}

fn serve(cfg: ServiceConfig) -> Result<()> {
    let svc = Service::open(cfg)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(ringwatch_service::api::serve(Arc::new(RwLock::new(svc))))?;
    Ok(())
}

fn ingest(cfg: ServiceConfig, events: &Path) -> Result<()> {
    let mut svc = Service::open(cfg)?;
    let input = BufReader::new(File::open(events).with_context(|| events.display().to_string())?);
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event = match serde_json::from_str(&line) {
            Ok(e) => e,
            Err(e) => {
                svc.poison(&format!("line {}: {e}", i + 1), &line);
                writeln!(out, "dead line {}", i + 1)?;
                continue;
            }
        };
        match svc.ingest(&event) {
            Ok(r) => writeln!(out, "ack {} {}", r.seq, r.user)?,
            Err(IngestError::Poisoned(reason)) => writeln!(out, "dead line {}: {reason}", i + 1)?,
            Err(e) => return Err(e.into()),
        }
        out.flush()?;
    }
    Ok(())
}

fn cc_run(edges: &Path, engine: Engine, out: Option<&Path>) -> Result<()> {
    let input = BufReader::new(File::open(edges).with_context(|| edges.display().to_string())?);
    let mut pairs = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let mut cols = line.split_whitespace();
        let (Some(a), Some(b)) = (cols.next(), cols.next()) else {
            continue;
        };
        let id = |s: &str| -> Result<UserId> {
            s.parse::<u64>()
                .ok()
                .and_then(UserId::new)
                .with_context(|| format!("line {}: bad user id {s:?}", i + 1))
        };
        let (a, b) = match (id(a), id(b)) {
            (Ok(a), Ok(b)) => (a, b),
            // tolerate a header row
            _ if i == 0 => continue,
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        if a != b {
            pairs.push((a, b));
        }
    }
    let edges = EdgeSet::from_pairs(pairs);
    let labels = match engine {
        Engine::Alternating => {
            let r = alternating_cc(&edges, &[], DEFAULT_MAX_ROUNDS)?;
            eprintln!("{} edges, {} rounds", edges.len(), r.rounds);
            r.labels
        }
        Engine::UnionFind => union_find_cc(edges.pairs(), &edges.nodes()),
    };
    let mut w: Box<dyn Write> = match out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout())),
    };
    for (u, l) in labels.sorted() {
        writeln!(w, "{u}\t{l}")?;
    }
    w.flush()?;
    Ok(())
}

fn replay(events: &Path, truth: Option<&Path>, cfg: ServiceConfig, purity: f64) -> Result<()> {
    let events = read_events(BufReader::new(File::open(events).with_context(|| events.display().to_string())?))?;
    let schema = match &cfg.schema_path {
        Some(p) => AttributeSchema::from_json(&std::fs::read_to_string(p)?)?,
        None => AttributeSchema::default_schema(),
    };
    let model = cfg.model_path.as_deref().map(EdgeClassifier::load).transpose()?;
    let mut cfg = cfg;
    cfg.data_dir = None;
    let d = run_detection(&events, cfg, schema, model)?;
    let mut summary = serde_json::json!({
        "events": events.len(),
        "elapsed_s": d.elapsed.as_secs_f64(),
        "actions": d.actions.len(),
        "metrics": d.metrics,
    });
    if let Some(t) = truth {
        let truth = GroundTruth::read_tsv(BufReader::new(File::open(t)?))?;
        summary["evaluation"] = serde_json::to_value(evaluate(&d.assignments, &d.actions, &truth, purity)?)?;
    }
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}
