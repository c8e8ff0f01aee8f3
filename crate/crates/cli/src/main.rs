//! `kgcrit`: train the base model, compute importance weights, run critiquing
//! simulations and sweeps, evaluate, and serve live sessions.
//!
//! Exit codes: 0 success, 2 usage, 3 i/o, 4 validation, 5 parse, 6 numeric.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use kgcrit_core::engine::{export_importance, import_importance, importance_weights};
use kgcrit_core::kg::{load_graph, load_interactions};
use kgcrit_core::model::{export_embeddings, import_embeddings, train_base};
use kgcrit_core::simulator::{
    evaluate_base, run_experiment, sweep, sweep_records, write_csv, write_jsonl, ReportRecord,
};
use kgcrit_core::synthetic::{
    generate, load_labels, SyntheticConfig, INTERACTIONS_FILE, ITEMS_FILE, TRIPLES_FILE,
};
use kgcrit_core::{
    Arm, CritiqueConfig, EmbeddingStoreF64, Error, ExperimentConfig, ExperimentResult,
    ImportanceWeightsF64, InteractionSet, KnowledgeGraph, SamplerConfig, SweepParam, TrainConfig,
};
use kgcrit_service::{AppState, Model, ServiceConfig};

#[derive(Parser)]
#[command(name = "kgcrit", version, about = "Knowledge-graph critiquing recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with a planted cluster structure.
    Synth(SynthArgs),
    /// Train the base embeddings.
    Train(TrainArgs),
    /// Compute per-user importance weights for the anti-forgetting prior.
    Weights(WeightsArgs),
    /// Evaluate the base model on the held-out interactions.
    Eval(EvalArgs),
    /// Run the multi-round simulated critiquing protocol.
    Simulate(SimulateArgs),
    /// Repeat the simulation over a grid of one engine parameter.
    Sweep(SweepArgs),
    /// Serve live critiquing sessions over HTTP.
    Serve(ServeArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Directory holding kg.txt, items.txt and interactions.txt.
    #[arg(long, env = "KGCRIT_DATA")]
    data: PathBuf,
    /// Fraction of each user's interactions kept for training.
    #[arg(long, default_value_t = 0.8, allow_negative_numbers = true)]
    train_ratio: f64,
    /// Seed of the train/test split.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Deepest hop indexed for proxy sampling.
    #[arg(long, default_value_t = 2)]
    max_hop: usize,
}

#[derive(Args)]
struct EngineArgs {
    #[arg(long, default_value_t = 0.005, allow_negative_numbers = true)]
    lr: f64,
    #[arg(long, default_value_t = 1e-3, allow_negative_numbers = true)]
    lambda_omega: f64,
    /// Margin constant of the critique likelihood.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    margin: f64,
    /// Optimizer steps per batch of critiques.
    #[arg(long, default_value_t = 5)]
    steps: usize,
    /// Proxy items M drawn per critiqued keyphrase.
    #[arg(long, default_value_t = 5)]
    samples: usize,
    /// Fraction r of the proxies drawn from hop 1.
    #[arg(long, default_value_t = 0.8, allow_negative_numbers = true)]
    hop_ratio: f64,
    /// ipgc, ipgc-t, random-sampling, no-regularizer or direct-keyphrase.
    #[arg(long, default_value = "ipgc")]
    arm: String,
}

impl EngineArgs {
    fn config(&self, max_hop: usize) -> Result<(Arm, CritiqueConfig), Error> {
        let arm = Arm::parse(&self.arm)?;
        let cfg = CritiqueConfig {
            learning_rate: self.lr,
            lambda_omega: self.lambda_omega,
            margin: self.margin,
            steps_per_critique: self.steps,
            sampler: SamplerConfig {
                samples: self.samples,
                max_hop,
                hop1_ratio: self.hop_ratio,
            },
            ..CritiqueConfig::default()
        };
        cfg.validate()?;
        Ok((arm, cfg))
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    items: Option<usize>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    noise_keyphrases: Option<usize>,
    /// Small block-structured dataset instead of the default one.
    #[arg(long)]
    planted: bool,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Embedding file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05, allow_negative_numbers = true)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Weight of the graph-embedding loss.
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    kg_weight: f64,
    #[arg(long, default_value_t = 1e-3, allow_negative_numbers = true)]
    l2: f64,
    /// Optional CSV of per-epoch mean loss.
    #[arg(long)]
    loss_log: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct WeightsArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    emb: PathBuf,
    /// Importance-weight file to write.
    #[arg(long)]
    out: PathBuf,
    /// Unused; accepted so every subcommand takes one.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    emb: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Report file; `.csv` writes CSV, anything else JSON lines.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Unused; accepted so every subcommand takes one.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long)]
    emb: PathBuf,
    #[arg(long)]
    omega: PathBuf,
    #[arg(long, default_value_t = 10)]
    rounds: usize,
    /// Keyphrases critiqued per round.
    #[arg(long, default_value_t = 5)]
    critiques: usize,
    /// List length the simulated user inspects.
    #[arg(long, default_value_t = 20)]
    top_n: usize,
    /// Metric cutoff.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Report file; `.csv` writes CSV, anything else JSON lines.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ExperimentArgs {
    fn config(&self) -> Result<ExperimentConfig, Error> {
        let (arm, engine) = self.engine.config(self.data.max_hop)?;
        let cfg = ExperimentConfig {
            rounds: self.rounds,
            critiques_per_round: self.critiques,
            top_n: self.top_n,
            k: self.k,
            engine,
            arm,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    run: ExperimentArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: ExperimentArgs,
    /// M, r or lambda_omega.
    #[arg(long)]
    param: String,
    /// Comma-separated grid.
    #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
    values: Vec<f64>,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long, env = "KGCRIT_EMB")]
    emb: PathBuf,
    #[arg(long, env = "KGCRIT_OMEGA")]
    omega: PathBuf,
    /// Keyphrase label sidecar (`entity<TAB>label` lines).
    #[arg(long, env = "KGCRIT_LABELS")]
    labels: Option<PathBuf>,
    #[arg(long, env = "KGCRIT_HOST", default_value = "127.0.0.1")]
    host: IpAddr,
    #[arg(long, env = "KGCRIT_PORT", default_value_t = 8080)]
    port: u16,
    /// Seconds of inactivity before a session expires.
    #[arg(long, default_value_t = 1800)]
    idle_timeout: u64,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Explanation keyphrases shown per item.
    #[arg(long, default_value_t = 5)]
    explanations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn load_data(args: &DataArgs) -> Result<(KnowledgeGraph, InteractionSet), Error> {
    let kg = load_graph(
        &args.data.join(TRIPLES_FILE),
        &args.data.join(ITEMS_FILE),
        args.max_hop,
    )?;
    let inter = load_interactions(
        &args.data.join(INTERACTIONS_FILE),
        &kg,
        args.train_ratio,
        args.split_seed,
    )?;
    Ok((kg, inter))
}

fn load_store(path: &Path, kg: &KnowledgeGraph, inter: &InteractionSet) -> Result<EmbeddingStoreF64, Error> {
    let store = import_embeddings(path)?;
    store.check_shape(kg, inter)?;
    Ok(store)
}

fn load_weights(path: &Path, store: &EmbeddingStoreF64) -> Result<ImportanceWeightsF64, Error> {
    let w: ImportanceWeightsF64 = import_importance(path)?;
    if w.n_users() != store.n_users() || w.dim() != store.dim() {
        return Err(Error::Shape(format!(
            "{} holds {}x{} weights, embeddings have {} users of dim {}",
            path.display(),
            w.n_users(),
            w.dim(),
            store.n_users(),
            store.dim()
        )));
    }
    Ok(w)
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| Error::Io { path: path.into(), source })
}

fn write_report(path: &Path, records: &[ReportRecord]) -> Result<(), Error> {
    let w = create(path)?;
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let res = if is_csv { write_csv(records, w) } else { write_jsonl(records, w) };
    res.map_err(|source| Error::Io { path: path.into(), source })
}

fn print_result(result: &ExperimentResult) {
    let k = result.k;
    println!("arm {}", result.arm.name());
    println!("step\tusers\trecall@{k}\tndcg@{k}\thr@{k}");
    for r in &result.rounds {
        let m = r.metrics;
        println!("{}\t{}\t{:.4}\t{:.4}\t{:.4}", r.step, r.users, m.recall, m.ndcg, m.hr);
    }
    if result.rounds.len() > 1 {
        let m = result.max_improvement();
        println!("maximp\t\t{:.4}\t{:.4}\t{:.4}", m.recall, m.ndcg, m.hr);
    }
}

fn synth(a: SynthArgs) -> Result<(), Error> {
    let mut cfg = if a.planted { SyntheticConfig::planted_block() } else { SyntheticConfig::default() };
    cfg.seed = a.seed;
    if let Some(v) = a.users {
        cfg.users = v;
    }
    if let Some(v) = a.items {
        cfg.items = v;
    }
    if let Some(v) = a.clusters {
        cfg.clusters = v;
    }
    if let Some(v) = a.noise_keyphrases {
        cfg.noise_keyphrases = v;
    }
    let ds = generate(&cfg)?;
    ds.write_to(&a.out)?;
    println!(
        "wrote {} items, {} triples, {} interactions to {}",
        ds.items.len(),
        ds.triples.len(),
        ds.interactions.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), Error> {
    let cfg = TrainConfig {
        dim: a.dim,
        epochs: a.epochs,
        learning_rate: a.lr,
        batch_size: a.batch,
        kg_loss_weight: a.kg_weight,
        l2_weight: a.l2,
        seed: a.seed,
    };
    cfg.validate()?;
    let (kg, inter) = load_data(&a.data)?;
    let (store, report) = train_base::<f64>(&kg, &inter, &cfg)?;
    export_embeddings(&store, &a.out)?;
    if let Some(path) = &a.loss_log {
        let mut w = create(path)?;
        let io = |source| Error::Io { path: path.clone(), source };
        writeln!(w, "epoch,loss").map_err(io)?;
        for (i, l) in report.epoch_loss.iter().enumerate() {
            writeln!(w, "{},{l}", i + 1).map_err(io)?;
        }
        w.flush().map_err(io)?;
    }
    match report.epoch_loss.last() {
        Some(l) => println!("trained {} epochs, final loss {l:.6}", cfg.epochs),
        None => println!("wrote initial embeddings"),
    }
    Ok(())
}

fn weights(a: WeightsArgs) -> Result<(), Error> {
    let (kg, inter) = load_data(&a.data)?;
    let store = load_store(&a.emb, &kg, &inter)?;
    let w = importance_weights(&store, &inter);
    export_importance(&w, &a.out)?;
    println!("wrote importance weights for {} users", w.n_users());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Error> {
    if a.k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let (kg, inter) = load_data(&a.data)?;
    let store = load_store(&a.emb, &kg, &inter)?;
    let r = evaluate_base(&store, &inter, a.k);
    let m = r.metrics;
    println!("users\t{}", r.users);
    for (name, score) in m.named(a.k) {
        println!("{name}\t{score:.6}");
    }
    if let Some(path) = &a.report {
        let records: Vec<ReportRecord> = m
            .named(a.k)
            .into_iter()
            .map(|(metric, score)| ReportRecord {
                arm: "base".into(),
                param: None,
                value: None,
                step: Some(0),
                metric,
                score,
            })
            .collect();
        write_report(path, &records)?;
    }
    Ok(())
}

struct Loaded {
    kg: KnowledgeGraph,
    inter: InteractionSet,
    store: EmbeddingStoreF64,
    weights: ImportanceWeightsF64,
}

fn load_all(data: &DataArgs, emb: &Path, omega: &Path) -> Result<Loaded, Error> {
    let (kg, inter) = load_data(data)?;
    let store = load_store(emb, &kg, &inter)?;
    let weights = load_weights(omega, &store)?;
    Ok(Loaded { kg, inter, store, weights })
}

fn simulate(a: SimulateArgs) -> Result<(), Error> {
    let cfg = a.run.config()?;
    let d = load_all(&a.run.data, &a.run.emb, &a.run.omega)?;
    let result = run_experiment(&cfg, &d.store, &d.weights, &d.kg, &d.inter)?;
    print_result(&result);
    if let Some(path) = &a.run.report {
        let mut records = result.records(None, None);
        if cfg.rounds == 0 {
            records.retain(|r| r.step.is_some());
        }
        write_report(path, &records)?;
    }
    Ok(())
}

fn run_sweep(a: SweepArgs) -> Result<(), Error> {
    let cfg = a.run.config()?;
    let param = SweepParam::parse(&a.param)?;
    for &v in &a.values {
        param.apply(&cfg, v)?;
    }
    let d = load_all(&a.run.data, &a.run.emb, &a.run.omega)?;
    let points = sweep(param, &a.values, &cfg, &d.store, &d.weights, &d.kg, &d.inter)?;
    for p in &points {
        println!("{} = {}", param.name(), p.value);
        print_result(&p.result);
    }
    if let Some(path) = &a.run.report {
        write_report(path, &sweep_records(param, &points))?;
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<(), Error> {
    let (arm, engine) = a.engine.config(a.data.max_hop)?;
    let cfg = ServiceConfig {
        critique: arm.engine_config(&engine),
        k: a.k,
        explanations: a.explanations,
        idle_timeout: Duration::from_secs(a.idle_timeout),
        seed: a.seed,
    };
    let d = load_all(&a.data, &a.emb, &a.omega)?;
    let mut model = Model::new(d.kg, d.inter, d.store, d.weights)?;
    if let Some(path) = &a.labels {
        model = model.with_labels(&load_labels(path)?)?;
    }
    let state = AppState::new(model, cfg)?;
    let addr = SocketAddr::new(a.host, a.port);
    let rt = tokio::runtime::Runtime::new().map_err(|source| Error::Io { path: "tokio runtime".into(), source })?;
    eprintln!("listening on http://{addr}");
    rt.block_on(kgcrit_service::serve(state, addr))
        .map_err(|source| Error::Io { path: addr.to_string().into(), source })
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::Parse { .. } => 5,
        Error::NonFinite(_) => 6,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let res = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Weights(a) => weights(a),
        Command::Eval(a) => eval(a),
        Command::Simulate(a) => simulate(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Serve(a) => serve(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("kgcrit: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
