mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use cellsearch::arch::{derive_shared, load_genotypes, save_genotypes};
use cellsearch::config::{parse_search_config, parse_train_config, search_keys, train_keys};
use cellsearch::container::Container;
use cellsearch::data::Corpus;
use cellsearch::gradsuite::run_suite;
use cellsearch::metrics::{compute_eer, run_protocol, Protocol};
use cellsearch::network::{ledger_total, parameter_ledger, Architecture, Network, NetworkConfig};
use cellsearch::search::{entropy_csv, run_search, Checkpointing, SearchState};
use cellsearch::synth::{synth_corpus, write_corpus, SynthConfig};
use cellsearch::train::{loss_csv, parse_trials, partition_scores, score_trials, scores_csv, train_derived};
use cellsearch::Error;

use manifest::{ManifestBuilder, MANIFEST_FILE};

const EXIT_USAGE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn key_listing(title: &str, keys: &[(String, String)]) -> String {
    let width = keys.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = format!("{title} (`key = value` lines, `#` comments):\n");
    for (k, v) in keys {
        s.push_str(&format!("  {k:<width$}  [default: {v}]\n"));
    }
    s
}

#[derive(Parser)]
#[command(
    name = "cellsearch",
    version,
    about = "Differentiable cell search for speaker verification",
    after_help = "Set CELLSEARCH_THREADS to bound worker threads; 1 runs fully serial.\n\
                  Exit codes: 0 success, 1 usage, 2 config or validation, 3 numeric failure."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multilingual, multi-device corpus with its manifest.
    Synth(SynthArgs),
    /// Search cell architectures; writes genotypes, entropy history and a checkpoint.
    #[command(after_help = key_listing("Config keys", &search_keys()))]
    Search(SearchArgs),
    /// Derive genotypes from a search checkpoint.
    Derive(DeriveArgs),
    /// Train a derived network from scratch.
    #[command(after_help = key_listing("Config keys", &train_keys()))]
    Train(TrainArgs),
    /// Fill a protocol EER matrix on the test split.
    Evaluate(EvaluateArgs),
    /// Count the trainable parameters of a derived network.
    Params(ParamsArgs),
    /// Run the gradient-check suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    speakers: usize,
    /// Utterances per speaker, language and device.
    #[arg(long, default_value_t = 2)]
    utts: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// Derive one genotype per cell kind instead of one per cell.
    #[arg(long)]
    share_genotypes: bool,
}

#[derive(Args)]
struct DeriveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Derive one genotype per cell kind instead of one per cell.
    #[arg(long)]
    share_genotypes: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    genotypes: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// One model for every row, or one per row of the protocol.
    #[arg(long = "model", alias = "models", num_args = 1.., required = true)]
    models: Vec<PathBuf>,
    /// language or interop.
    #[arg(long, default_value = "language")]
    protocol: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Trial subsampling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also score a `<0|1> <enrol> <probe>` trial list with the first model.
    #[arg(long)]
    trials: Option<PathBuf>,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long)]
    genotypes: PathBuf,
    #[arg(long, default_value_t = 8)]
    cells: usize,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = 103)]
    speakers: usize,
    #[arg(long, default_value_t = 128)]
    embedding: usize,
    /// Print the per-layer ledger as well.
    #[arg(long)]
    ledger: bool,
    /// Directory for the run manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for the run manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Numeric { .. } => EXIT_NUMERIC,
            _ => EXIT_CONFIG,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: EXIT_CONFIG,
            message: e.to_string(),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn config_failure(message: String) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        message,
    }
}

fn require_file(path: &Path) -> std::result::Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(config_failure(format!("no such file: {}", path.display())))
    }
}

fn require_dir(path: &Path) -> std::result::Result<(), Failure> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(config_failure(format!("no such directory: {}", path.display())))
    }
}

fn read_text(path: Option<&Path>) -> std::result::Result<String, Failure> {
    match path {
        Some(p) => {
            require_file(p)?;
            Ok(fs::read_to_string(p)?)
        }
        None => Ok(String::new()),
    }
}

fn load_corpus(dir: &Path, normalize: bool) -> std::result::Result<Corpus, Failure> {
    require_dir(dir)?;
    let c = Corpus::load(dir)?;
    Ok(if normalize { c.normalized() } else { c })
}

fn synth(a: SynthArgs) -> Outcome {
    let m = ManifestBuilder::start("synth");
    let cfg = SynthConfig {
        num_speakers: a.speakers,
        utts_per_cell: a.utts,
        seed: a.seed,
    };
    let items = synth_corpus(&cfg)?;
    let manifest = write_corpus(&items, &a.out)?;
    println!("{} utterances written to {}", items.len(), a.out.display());
    m.finish(
        serde_json::to_value(&cfg).map_err(Error::from)?,
        a.seed,
        &[manifest],
        &a.out.join(MANIFEST_FILE),
    )?;
    Ok(())
}

fn search(a: SearchArgs) -> Outcome {
    let mut m = ManifestBuilder::start("search");
    let cfg = parse_search_config(&read_text(a.config.as_deref())?)?;
    if let Some(p) = &a.config {
        m.input(p)?;
    }
    let corpus = load_corpus(&a.data, cfg.model.normalize)?;
    m.input(&a.data)?;
    let net_cfg = cfg.model.network(corpus.speakers.len())?;
    let train = corpus.train_set();
    let mut split_rng = ChaCha8Rng::seed_from_u64(cfg.search.seed);
    let (search_train, search_val) = train.split(cfg.search.val_fraction, &mut split_rng);

    fs::create_dir_all(&a.out)?;
    let ckpt = a.out.join("search.nmlg");
    let mut state = if a.resume && ckpt.is_file() {
        let s = SearchState::load(&ckpt)?;
        if s.config != cfg.search || s.net.config != net_cfg {
            return Err(config_failure(format!(
                "{} was written with a different configuration",
                ckpt.display()
            )));
        }
        eprintln!("resuming after epoch {}", s.epoch);
        s
    } else {
        SearchState::new(cfg.search.clone(), &net_cfg)?
    };
    let outcome = run_search(
        &mut state,
        &search_train,
        &search_val,
        &Checkpointing {
            path: Some(ckpt.clone()),
        },
        |e| {
            eprintln!(
                "epoch {:>3}  train loss {:.4}  val loss {:.4}  entropy {:.4}",
                e.epoch, e.train_loss, e.val_loss, e.entropy
            )
        },
    )?;
    let genotypes = if a.share_genotypes {
        derive_shared(&outcome.alphas)
    } else {
        outcome.genotypes
    };
    let gpath = a.out.join("genotypes.json");
    save_genotypes(&gpath, &genotypes)?;
    let epath = a.out.join("entropy.csv");
    fs::write(&epath, entropy_csv(&outcome.entropy))?;
    println!(
        "{} epochs, final entropy {:.4}{}",
        outcome.entropy.len(),
        outcome.entropy.last().copied().unwrap_or(f64::NAN),
        if outcome.converged { " (converged)" } else { "" }
    );
    let mut resolved = serde_json::to_value(&cfg).map_err(Error::from)?;
    resolved["share_genotypes"] = json!(a.share_genotypes);
    m.finish(
        resolved,
        cfg.search.seed,
        &[gpath, epath, ckpt],
        &a.out.join(MANIFEST_FILE),
    )?;
    Ok(())
}

fn derive(a: DeriveArgs) -> Outcome {
    let mut m = ManifestBuilder::start("derive");
    require_file(&a.checkpoint)?;
    m.input(&a.checkpoint)?;
    let state = SearchState::load(&a.checkpoint)?;
    let genotypes = if a.share_genotypes {
        derive_shared(&state.alphas())
    } else {
        state.genotypes()
    };
    save_genotypes(&a.out, &genotypes)?;
    println!("{} genotypes written to {}", genotypes.len(), a.out.display());
    m.finish(
        json!({ "epoch": state.epoch, "share_genotypes": a.share_genotypes }),
        state.config.seed,
        &[a.out.clone()],
        &a.out.with_extension(MANIFEST_FILE),
    )?;
    Ok(())
}

fn train(a: TrainArgs) -> Outcome {
    let mut m = ManifestBuilder::start("train");
    let cfg = parse_train_config(&read_text(a.config.as_deref())?)?;
    if let Some(p) = &a.config {
        m.input(p)?;
    }
    require_file(&a.genotypes)?;
    m.input(&a.genotypes)?;
    let genotypes = load_genotypes(&a.genotypes)?;
    let corpus = load_corpus(&a.data, cfg.model.normalize)?;
    m.input(&a.data)?;
    let net_cfg = cfg.model.network(corpus.speakers.len())?;
    fs::create_dir_all(&a.out)?;
    let snapshot = a.out.join("model.failed.nmlg");
    let trainer = train_derived(
        &genotypes,
        &cfg.train,
        &net_cfg,
        &corpus.train_set(),
        Some(&snapshot),
        |e| eprintln!("epoch {:>3}  loss {:.4}  accuracy {:.3}", e.epoch, e.loss, e.accuracy),
    )?;
    let model = a.out.join("model.nmlg");
    let mut c = trainer.net.to_container()?;
    c.config["frontend"] = json!({ "normalize": cfg.model.normalize });
    c.save(&model)?;
    let losses = a.out.join("loss.csv");
    fs::write(&losses, loss_csv(&trainer.history))?;
    println!("{} parameters, model written to {}", trainer.net.count_parameters(), model.display());
    m.finish(
        serde_json::to_value(&cfg).map_err(Error::from)?,
        cfg.train.seed,
        &[model, losses],
        &a.out.join(MANIFEST_FILE),
    )?;
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Outcome {
    let mut m = ManifestBuilder::start("evaluate");
    let protocol: Protocol = a.protocol.parse()?;
    let mut nets = Vec::with_capacity(a.models.len());
    let mut normalize = None;
    for p in &a.models {
        require_file(p)?;
        m.input(p)?;
        let c = Container::load(p)?;
        let flag = c.config["frontend"]["normalize"].as_bool().unwrap_or(false);
        if normalize.is_some_and(|n| n != flag) {
            return Err(config_failure(format!(
                "{} uses a different frontend normalisation from the other models",
                p.display()
            )));
        }
        normalize = Some(flag);
        nets.push(Network::from_container(&c)?);
    }
    let corpus = load_corpus(&a.data, normalize.unwrap_or(false))?;
    m.input(&a.data)?;
    let refs: Vec<&Network> = nets.iter().collect();
    let matrix = run_protocol(&refs, &corpus, protocol, a.seed)?;
    fs::create_dir_all(&a.out)?;
    let csv = a.out.join(format!("{}.csv", a.protocol));
    fs::write(&csv, matrix.to_csv())?;
    let md = a.out.join(format!("{}.md", a.protocol));
    let table = matrix.to_markdown();
    fs::write(&md, &table)?;
    print!("{table}");
    let mut outputs = vec![csv, md];
    if let Some(tp) = &a.trials {
        require_file(tp)?;
        m.input(tp)?;
        let trials = parse_trials(&fs::read_to_string(tp)?)?;
        let scores = score_trials(&nets[0], &trials, &corpus.by_path())?;
        let sp = a.out.join("scores.csv");
        fs::write(&sp, scores_csv(&trials, &scores))?;
        let (g, i) = partition_scores(&trials, &scores);
        if !g.is_empty() && !i.is_empty() {
            println!("trial list EER {:.2}%", 100.0 * compute_eer(&g, &i)?.eer);
        }
        outputs.push(sp);
    }
    m.finish(
        json!({ "protocol": a.protocol }),
        a.seed,
        &outputs,
        &a.out.join(MANIFEST_FILE),
    )?;
    Ok(())
}

fn params(a: ParamsArgs) -> Outcome {
    let mut m = ManifestBuilder::start("params");
    require_file(&a.genotypes)?;
    m.input(&a.genotypes)?;
    let genotypes = load_genotypes(&a.genotypes)?;
    let cfg = NetworkConfig {
        num_cells: a.cells,
        init_channels: a.channels,
        num_speakers: a.speakers,
        embedding_dim: a.embedding,
        ..NetworkConfig::default()
    };
    let net = Network::derived(&cfg, &genotypes, 0)?;
    let ledger = parameter_ledger(&cfg, &Architecture::Derived(genotypes))?;
    let count = net.count_parameters();
    if count != ledger_total(&ledger) {
        return Err(Failure {
            code: EXIT_NUMERIC,
            message: format!("runtime tally {count} disagrees with ledger {}", ledger_total(&ledger)),
        });
    }
    if a.ledger {
        for e in &ledger {
            println!("{:<18} {:>10}", e.name, e.count);
        }
    }
    println!("{count}");
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        m.finish(
            serde_json::to_value(&cfg).map_err(Error::from)?,
            0,
            &[],
            &out.join(MANIFEST_FILE),
        )?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Outcome {
    let m = ManifestBuilder::start("gradcheck");
    let entries = run_suite(a.seed)?;
    let mut failed = 0;
    for e in &entries {
        let ok = e.pass();
        failed += usize::from(!ok);
        println!(
            "{} {:<24} max rel error {:.2e} (< {:.0e}, {} coords)",
            if ok { "PASS" } else { "FAIL" },
            e.name,
            e.report.max_rel_error,
            e.tolerance,
            e.report.checked
        );
    }
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        m.finish(json!({ "failed": failed }), a.seed, &[], &out.join(MANIFEST_FILE))?;
    }
    if failed > 0 {
        return Err(Failure {
            code: EXIT_NUMERIC,
            message: format!("{failed} of {} gradient checks failed", entries.len()),
        });
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Search(a) => search(a),
        Command::Derive(a) => derive(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Params(a) => params(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
