use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use discern::benchmark::{build_benchmark, Axis, BenchmarkEmbeddings, BenchmarkSuite, BuildConfig, SID_MAP_FILE};
use discern::corpus::{five_core_filter, ingest_interactions, subsample_users, Catalog, InputFormat, Split};
use discern::embedding::{load_embeddings, standardize};
use discern::eval::{
    aggregate_reports, evaluate_suite, relative_improvement, render_bar_chart, EvalConfig, MetricReport, PlotMetric,
};
use discern::preference::{
    approximate_preferences, load_preference_sets, save_preference_sets, GenerationConfig, HttpChatClient, InversionStyle,
    LlmClient, PromptTemplate, ReplayClient,
};
use discern::quantizer::{
    assign_semantic_ids, codebook_coverage, train_residual_kmeans, train_rqvae, QuantizerKind, RqVaeConfig, SidMap,
};
use discern::recommenders::{
    train_markov, training_sequences, BeamRecommender, ModelBundle, ModelKind, Recommender, SubprocessScorer, DEFAULT_ALPHA,
    DEFAULT_LAMBDA, DEFAULT_NEGATIVE_PENALTY, DEFAULT_ORDER,
};
use discern::service::{serve, ServiceConfig};

type CliResult<T = ()> = Result<T, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "discern", version, about = "Semantic IDs, steerable-recommendation benchmarks and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read an interaction log into a binary catalog
    Ingest(IngestArgs),
    /// Convert JSONL `{id, vector}` rows to the binary embedding format
    EmbedPack {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Preference generation
    Prefs {
        #[command(subcommand)]
        command: PrefsCommand,
    },
    /// Train a quantizer and write the semantic-ID map
    Quantize(QuantizeArgs),
    /// Build the evaluation suite
    BuildBenchmark(BuildArgs),
    /// Fit the reference Markov or fusion model
    Train(TrainArgs),
    /// Run a model over a suite
    Evaluate(EvaluateArgs),
    /// Compare two reports, or aggregate several
    Report(ReportArgs),
    /// Bar chart of one metric across reports, as SVG
    Plot(PlotArgs),
    /// Start the HTTP service
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "jsonl")]
    format: InputFormat,
    #[arg(long)]
    five_core: bool,
    /// Keep a seeded uniform sample of this many users
    #[arg(long)]
    users: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum PrefsCommand {
    Generate {
        #[arg(long)]
        catalog: PathBuf,
        /// Built-in name (default, abstract, fine_grained, item_properties) or a template file
        #[arg(long, default_value = "default")]
        template: String,
        /// Chat-completions URL, or `replay:<path>` for recorded responses
        #[arg(long)]
        client: String,
        #[arg(long, default_value = "default")]
        llm_model: String,
        #[arg(long, default_value_t = 2)]
        retries: usize,
        #[arg(long, default_value_t = 4)]
        concurrency: usize,
        #[arg(long, default_value_t = 120)]
        timeout_secs: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, default_value = "rkmeans")]
    kind: QuantizerKind,
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[arg(long, default_value_t = 256)]
    k: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 25)]
    max_iters: usize,
    /// RQ-VAE encoder widths after the input, comma separated; the last is the latent size
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Semantic-ID map output; defaults to `<out>.sids.tsv`
    #[arg(long)]
    sids: Option<PathBuf>,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    prefs: PathBuf,
    /// `item=<path>,pref=<path>[,review=<path>]`
    #[arg(long)]
    embeddings: String,
    #[arg(long)]
    sids: PathBuf,
    #[arg(long, default_value_t = discern::corpus::DEFAULT_MAX_HISTORY)]
    max_history: usize,
    #[arg(long, default_value = "find")]
    inversion: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    sids: PathBuf,
    #[arg(long, default_value = "fusion")]
    kind: ModelKind,
    #[arg(long, default_value_t = DEFAULT_ORDER)]
    order: usize,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long, default_value_t = DEFAULT_NEGATIVE_PENALTY)]
    negative_penalty: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    suite: PathBuf,
    /// A model file from `discern train`, or `exec:<command>` for an external scorer
    #[arg(long)]
    model: String,
    #[arg(long, value_delimiter = ',', default_value = "5,10")]
    ks: Vec<usize>,
    #[arg(long, default_value_t = discern::sid_index::DEFAULT_BEAM_WIDTH)]
    beam: usize,
    #[arg(long, value_delimiter = ',', default_value = "test")]
    splits: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    axes: Option<Vec<Axis>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, requires = "b", conflicts_with = "aggregate")]
    a: Option<PathBuf>,
    #[arg(long)]
    b: Option<PathBuf>,
    /// Mean ± sample std across these reports
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    aggregate: Option<Vec<PathBuf>>,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
    reports: Vec<PathBuf>,
    #[arg(long, default_value = "recall")]
    metric: PlotMetric,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

fn parse_split(s: &str) -> CliResult<Split> {
    Split::ALL
        .into_iter()
        .find(|x| x.as_str() == s)
        .ok_or_else(|| format!("unknown split `{s}`").into())
}

fn default_sids_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".sids.tsv");
    PathBuf::from(s)
}

fn ingest(a: IngestArgs) -> CliResult {
    let mut catalog = ingest_interactions(&a.input, a.format)?;
    if let Some(n) = a.users {
        catalog = subsample_users(&catalog, n, a.seed);
    }
    if a.five_core {
        catalog = five_core_filter(&catalog)?;
    }
    catalog.save(&a.out)?;
    println!(
        "{} users, {} items, {} interactions -> {}",
        catalog.num_users(),
        catalog.num_items(),
        catalog.num_interactions(),
        a.out.display()
    );
    Ok(())
}

fn prefs(cmd: PrefsCommand) -> CliResult {
    let PrefsCommand::Generate {
        catalog,
        template,
        client,
        llm_model,
        retries,
        concurrency,
        timeout_secs,
        out,
    } = cmd;
    let catalog = Catalog::load(&catalog)?;
    let template = PromptTemplate::resolve(&template)?;
    let client: Box<dyn LlmClient> = match client.strip_prefix("replay:") {
        Some(path) => Box::new(ReplayClient::load(Path::new(path))?),
        None => {
            let mut c = HttpChatClient::new(client, llm_model, Duration::from_secs(timeout_secs))?;
            if let Ok(key) = std::env::var("DISCERN_LLM_API_KEY") {
                c = c.with_api_key(key);
            }
            Box::new(c)
        }
    };
    let config = GenerationConfig {
        max_retries: retries,
        concurrency,
        ..GenerationConfig::default()
    };
    let report = approximate_preferences(&catalog, client.as_ref(), &template, &config)?;
    save_preference_sets(&out, &report.sets)?;
    println!(
        "{} sets, {} missing, {} client calls ({} retries), {} truncated prompts",
        report.sets.len(),
        report.missing.len(),
        report.client_calls,
        report.retries,
        report.truncated_prompts
    );
    for (user, t) in &report.missing {
        log::warn!("no preference set for {user} at t={t}");
    }
    Ok(())
}

fn quantize(a: QuantizeArgs) -> CliResult {
    let matrix = load_embeddings(&a.embeddings)?;
    let model = match a.kind {
        QuantizerKind::ResidualKmeans => train_residual_kmeans(&matrix, a.levels, a.k, a.seed, a.max_iters)?,
        QuantizerKind::Rqvae => {
            let defaults = RqVaeConfig::default();
            let widths = a
                .widths
                .unwrap_or_else(|| defaults.widths.iter().copied().filter(|&w| w <= matrix.dim()).collect());
            let cfg = RqVaeConfig {
                widths,
                n_levels: a.levels,
                k: a.k,
                seed: a.seed,
                kmeans_iters: a.max_iters,
                epochs: a.epochs.unwrap_or(defaults.epochs),
                ..defaults
            };
            train_rqvae(&standardize(&matrix)?, &cfg)?
        }
    };
    let input = if model.input_standardization.is_some() {
        standardize(&matrix)?
    } else {
        matrix
    };
    let sids = assign_semantic_ids(&model, &input)?;
    let coverage = codebook_coverage(&model, &input)?;
    model.save(&a.out)?;
    let sids_path = a.sids.unwrap_or_else(|| default_sids_path(&a.out));
    sids.save(&sids_path)?;
    let cov: Vec<String> = coverage.iter().map(|c| format!("{c:.3}")).collect();
    println!(
        "{} items, coverage per level [{}], max disambiguator {} -> {}, {}",
        sids.len(),
        cov.join(", "),
        sids.max_disambiguator(),
        a.out.display(),
        sids_path.display()
    );
    Ok(())
}

fn build(a: BuildArgs) -> CliResult {
    let mut item = None;
    let mut pref = None;
    let mut review = None;
    for part in a.embeddings.split(',') {
        let (role, path) = part
            .split_once('=')
            .ok_or_else(|| format!("expected role=path in --embeddings, got `{part}`"))?;
        let m = load_embeddings(Path::new(path))?;
        match role {
            "item" => item = Some(m),
            "pref" => pref = Some(m),
            "review" => review = Some(m),
            other => return Err(format!("unknown embedding role `{other}`").into()),
        }
    }
    let items = item.ok_or("--embeddings needs item=<path>")?;
    let prefs = pref.ok_or("--embeddings needs pref=<path>")?;
    let catalog = Catalog::load(&a.catalog)?;
    let sets = load_preference_sets(&a.prefs)?;
    let sids = SidMap::load(&a.sids)?;
    let config = BuildConfig {
        max_history: a.max_history,
        inversion: match a.inversion.as_str() {
            "find" => InversionStyle::Find,
            "search_for" => InversionStyle::SearchFor,
            other => return Err(format!("inversion must be find or search_for, got `{other}`").into()),
        },
    };
    let emb = BenchmarkEmbeddings {
        items: &items,
        prefs: &prefs,
        reviews: review.as_ref(),
    };
    let suite = build_benchmark(&catalog, &sets, &emb, Some(&sids), &config)?;
    suite.save(&a.out)?;
    for (axis, c) in &suite.manifest.counts {
        println!(
            "{:<16} train {:>6}  val {:>6}  test {:>6}  skipped {:>6}",
            axis.as_str(),
            c.train,
            c.val,
            c.test,
            c.skipped
        );
    }
    println!("suite {} -> {}", suite.digest(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> CliResult {
    let catalog = Catalog::load(&a.catalog)?;
    let sids = SidMap::load(&a.sids)?;
    let seqs = training_sequences(&catalog, &sids)?;
    let markov = train_markov(&seqs, sids.n_levels, sids.k, a.order, a.alpha)?;
    let bundle = ModelBundle {
        kind: a.kind,
        markov,
        lambda: a.lambda,
        negative_penalty: a.negative_penalty,
        sids,
    };
    bundle.save(&a.out)?;
    println!("{} sequences, model {} -> {}", seqs.len(), bundle.digest(), a.out.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> CliResult {
    let suite = BenchmarkSuite::load(&a.suite)?;
    let model: Box<dyn Recommender> = match a.model.strip_prefix("exec:") {
        Some(cmd) => {
            let sids = match &suite.sids {
                Some(s) => s.clone(),
                None => SidMap::load(&a.suite.join(SID_MAP_FILE))?,
            };
            Box::new(BeamRecommender::new("exec", SubprocessScorer::spawn(cmd)?, sids)?)
        }
        None => ModelBundle::load(Path::new(&a.model))?.into_recommender(Some(suite.item_embeddings.clone()))?,
    };
    let config = EvalConfig {
        ks: a.ks,
        beam_width: a.beam,
        splits: a.splits.iter().map(|s| parse_split(s)).collect::<CliResult<_>>()?,
        axes: a.axes.unwrap_or_else(|| Axis::ALL.to_vec()),
    };
    let report = evaluate_suite(model.as_ref(), &suite, &config)?;
    report.save(&a.out)?;
    print!("{}", report.to_table());
    Ok(())
}

fn report(a: ReportArgs) -> CliResult {
    if let Some(paths) = a.aggregate {
        let reports = paths.iter().map(|p| MetricReport::load(p)).collect::<Result<Vec<_>, _>>()?;
        println!("{:<16}{:<7}{:>4}{:>20}{:>20}{:>20}", "axis", "split", "k", "Recall", "NDCG", "m");
        for c in aggregate_reports(&reports)? {
            let ms = |m: discern::eval::MeanStd| format!("{:.4} ± {:.4}", m.mean, m.std);
            println!(
                "{:<16}{:<7}{:>4}{:>20}{:>20}{:>20}",
                c.axis.as_str(),
                c.split.as_str(),
                c.k,
                ms(c.recall),
                ms(c.ndcg),
                c.m.map_or("-".to_string(), ms)
            );
        }
        return Ok(());
    }
    let (Some(a_path), Some(b_path)) = (a.a, a.b) else {
        return Err("give --a and --b, or --aggregate".into());
    };
    let table = relative_improvement(&MetricReport::load(&a_path)?, &MetricReport::load(&b_path)?)?;
    print!("{}", table.to_table());
    Ok(())
}

fn plot(a: PlotArgs) -> CliResult {
    let reports = a.reports.iter().map(|p| MetricReport::load(p)).collect::<Result<Vec<_>, _>>()?;
    let svg = render_bar_chart(&reports, a.metric, parse_split(&a.split)?, a.k);
    std::fs::write(&a.out, svg)?;
    println!("{}", a.out.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::EmbedPack { input, out } => {
            let m = load_embeddings(&input)?;
            m.save(&out)?;
            println!("{} vectors of dimension {} -> {}", m.len(), m.dim(), out.display());
            Ok(())
        }
        Command::Prefs { command } => prefs(command),
        Command::Quantize(a) => quantize(a),
        Command::BuildBenchmark(a) => build(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => report(a),
        Command::Plot(a) => plot(a),
        Command::Serve { config } => {
            let cfg = ServiceConfig::from_file(&config)?;
            tokio::runtime::Runtime::new()?.block_on(serve(cfg))?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
