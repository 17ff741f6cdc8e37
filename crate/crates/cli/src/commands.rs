use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use resim::corpus::{load_corpus, mine_triplets, read_triplets, write_triplets, MiningConfig, Pool, QuerySet};
use resim::embed::{embed_pool, Embedder, EmbedderSpec, EXTERNAL};
use resim::eval::{evaluate_entries, generate_synthetic_corpus, window_sweep, EvalEntry, MetricReport, SynthConfig};
use resim::index::VectorIndex;
use resim::normalize::{normalize_function, NormalizeConfig};
use resim::pipeline::{run_queries, Retriever, SearchConfig, SearchEngine, SearchResult, TokenCache};
use resim::rerank::{
    train_linear_scorer, Endpoint, ExternalConfig, ExternalScorer, LexicalScorer, LinearScorer, LinearScorerModel,
    OracleScorer, Scorer, TrainConfig,
};

use crate::args::*;
use crate::manifest::ManifestBuilder;
use crate::UsageError;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.jobs == 0 {
        return Err(usage("--jobs must be >= 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build_global()
        .context("starting worker pool")?;
    let jobs = cli.jobs;
    match cli.command {
        Command::Ingest(a) => ingest(&a, jobs),
        Command::Normalize(a) => normalize(&a, jobs),
        Command::Index(IndexCommand::Build(a)) => index_build(&a, jobs),
        Command::Index(IndexCommand::Query(a)) => index_query(&a),
        Command::Query(a) => query(&a, jobs, "query"),
        Command::EnsembleQuery(a) => query(&a, jobs, "ensemble-query"),
        Command::MineTriplets(a) => mine(&a, jobs),
        Command::TrainScorer(a) => train(&a, jobs),
        Command::Eval(a) => eval(&a, jobs),
        Command::Sweep(a) => sweep(&a, jobs),
        Command::Bench(a) => bench(&a, jobs),
        Command::Synth(a) => synth(&a, jobs),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing

fn norm_config(a: &NormArgs) -> Result<NormalizeConfig> {
    let mut cfg = NormalizeConfig {
        imm_threshold: a.imm_threshold,
        max_pair_tokens: a.max_pair_tokens,
        ..NormalizeConfig::default()
    };
    if let Some(path) = &a.libc_names {
        cfg.libc_names = NormalizeConfig::load_libc_names(path)?;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

/// The embedder an index was built with; sidecar indexes reload their file.
fn embedder_for(index: &VectorIndex) -> Result<Embedder> {
    let spec = index.embedder();
    if spec.params.get("kind").map(String::as_str) == Some(EXTERNAL) {
        let source = spec
            .params
            .get("source")
            .context("sidecar index does not record its source file")?;
        return Ok(Embedder::from_sidecar(&spec.name, spec.dim, Path::new(source))?);
    }
    Ok(Embedder::from_spec(spec)?)
}

fn load_indexes(paths: &[PathBuf]) -> Result<(Vec<VectorIndex>, Vec<Embedder>)> {
    let indexes: Vec<VectorIndex> = paths
        .iter()
        .map(|p| VectorIndex::load(p))
        .collect::<resim::Result<_>>()?;
    let embedders = indexes.iter().map(embedder_for).collect::<Result<_>>()?;
    Ok((indexes, embedders))
}

fn check_selection(sel: &QuerySelection) -> Result<()> {
    if sel.query_ids.is_empty() && sel.queries.is_none() {
        return Err(usage("give --query-id or --queries"));
    }
    Ok(())
}

fn query_set(sel: &QuerySelection, pool: &Pool) -> Result<QuerySet> {
    let mut set = match &sel.queries {
        Some(path) => QuerySet::load(path)?,
        None => QuerySet::default(),
    };
    set.entries
        .extend(QuerySet::from_ids(sel.query_ids.iter().cloned()).entries);
    set.validate(pool)?;
    Ok(set)
}

enum ScorerSpec {
    Lexical,
    Oracle,
    Linear(PathBuf),
    External(Endpoint),
}

fn parse_scorer(a: &ScorerArgs) -> Result<ScorerSpec> {
    let text = a.scorer.as_str();
    let spec = match text.split_once(':') {
        None if text == "lexical" => ScorerSpec::Lexical,
        None if text == "oracle" => ScorerSpec::Oracle,
        Some(("linear", path)) if !path.is_empty() => ScorerSpec::Linear(PathBuf::from(path)),
        Some(("external", ep)) => ScorerSpec::External(Endpoint::parse(ep).map_err(|e| usage(e.to_string()))?),
        _ => {
            return Err(usage(format!(
                "unknown scorer `{text}` (expected lexical, linear:<model.json>, oracle or external:<endpoint>)"
            )))
        }
    };
    if !(a.scorer_timeout > 0.0 && a.scorer_timeout.is_finite()) {
        return Err(usage("--scorer-timeout must be positive"));
    }
    Ok(spec)
}

fn build_scorer(spec: ScorerSpec, a: &ScorerArgs, pool: &Pool) -> Result<Box<dyn Scorer>> {
    Ok(match spec {
        ScorerSpec::Lexical => Box::new(LexicalScorer),
        ScorerSpec::Oracle => Box::new(OracleScorer::from_pool(pool)),
        ScorerSpec::Linear(path) => Box::new(LinearScorer::new(LinearScorerModel::load(&path)?)?),
        ScorerSpec::External(endpoint) => {
            let cfg = ExternalConfig {
                endpoint,
                timeout: Duration::from_secs_f64(a.scorer_timeout),
            };
            let scorer = ExternalScorer::connect(cfg)?;
            log::info!("connected to scorer service `{}`", scorer.service_name());
            Box::new(scorer)
        }
    })
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn write_json_line(out: &mut dyn Write, value: &impl Serialize) -> Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")?;
    Ok(())
}

fn write_pretty(path: Option<&Path>, value: &impl Serialize) -> Result<()> {
    let mut out = open_output(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn read_run(path: &Path) -> Result<Vec<SearchResult>> {
    let file = File::open(path).with_context(|| format!("{}: cannot open", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("{}: read failed", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).with_context(|| format!("{}:{}: not a search result", path.display(), i + 1))?;
        out.push(r);
    }
    Ok(out)
}

/// Search output without wall-clock data, so reruns are byte-identical.
fn without_timing(r: &SearchResult) -> Result<Value> {
    let mut v = serde_json::to_value(r)?;
    if let Some(map) = v.as_object_mut() {
        map.remove("timing");
    }
    Ok(v)
}

fn check_ks(ks: &[usize]) -> Result<()> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(usage("--ks needs one or more values >= 1"));
    }
    Ok(())
}

fn check_windows(ws: &[usize], k: usize) -> Result<()> {
    if ws.is_empty() || ws.windows(2).any(|p| p[0] >= p[1]) {
        return Err(usage("window sizes must be strictly ascending"));
    }
    if k == 0 || k > ws[0] {
        return Err(usage(format!("k must be ≤ w (k = {k}, smallest w = {})", ws[0])));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Commands

fn ingest(a: &IngestArgs, jobs: usize) -> Result<()> {
    let manifest = ManifestBuilder::new("ingest", a, jobs)?.input(&a.input);
    let pool = load_corpus(&a.input)?;
    let manifest = match &a.queries {
        Some(q) => {
            QuerySet::load(q)?.validate(&pool)?;
            manifest.input(q)
        }
        None => manifest,
    };
    pool.write_jsonl(&a.out)?;
    let summary = json!({"functions": pool.len(), "classes": pool.by_source_key().len()});
    eprintln!("{} functions in {} classes", pool.len(), pool.by_source_key().len());
    manifest.summary(summary).write(&a.out, &[&a.out])
}

#[derive(Serialize)]
struct TokenLine<'a> {
    id: &'a str,
    tokens: &'a [String],
}

fn normalize(a: &NormalizeArgs, jobs: usize) -> Result<()> {
    let cfg = norm_config(&a.norm)?;
    let manifest = ManifestBuilder::new("normalize", a, jobs)?.input(&a.input);
    let pool = load_corpus(&a.input)?;
    let seqs = pool
        .sorted_ids()
        .into_par_iter()
        .map(|id| normalize_function(pool.require(id)?, &cfg))
        .collect::<resim::Result<Vec<_>>>()?;
    let mut out = open_output(Some(&a.out))?;
    for s in &seqs {
        write_json_line(&mut out, &TokenLine { id: &s.origin_id, tokens: &s.tokens })?;
    }
    out.flush()?;
    manifest.write(&a.out, &[&a.out])
}

fn index_build(a: &IndexBuildArgs, jobs: usize) -> Result<()> {
    let cfg = norm_config(&a.norm)?;
    let spec = match &a.sidecar {
        Some(_) => None,
        None => Some(EmbedderSpec::parse(&a.embedder).map_err(|e| usage(e.to_string()))?),
    };
    let mut manifest = ManifestBuilder::new("index build", a, jobs)?.input(&a.corpus);
    let pool = load_corpus(&a.corpus)?;
    let embedder = match (&a.sidecar, spec) {
        (Some(path), _) => {
            manifest = manifest.input(path);
            let name = a.name.as_deref().context("--sidecar needs --name")?;
            let dim = a.dim.context("--sidecar needs --dim")?;
            Embedder::from_sidecar(name, dim, path)?
        }
        (None, Some(spec)) => {
            manifest = manifest.seed("embedder", spec.seed()?);
            Embedder::from_spec(&spec)?
        }
        (None, None) => unreachable!("spec parsed above"),
    };
    let index = VectorIndex::build(embedder.spec().clone(), embed_pool(&embedder, &pool, &cfg)?)?;
    index.save(&a.out)?;
    eprintln!("indexed {} functions with `{}`", index.len(), index.embedder());
    manifest
        .summary(json!({"functions": index.len(), "embedder": index.embedder().to_string()}))
        .write(&a.out, &[&a.out])
}

fn index_query(a: &IndexQueryArgs) -> Result<()> {
    if a.w == 0 {
        return Err(usage("window size must be >= 1"));
    }
    let index = VectorIndex::load(&a.index)?;
    let vector = index
        .vector_of(&a.query_id)
        .ok_or_else(|| resim::Error::UnknownId(a.query_id.clone()))?;
    let window = index.query_window_for(&a.query_id, &vector, a.w)?;
    let mut out = open_output(None)?;
    write_json_line(&mut out, &window)?;
    out.flush()?;
    Ok(())
}

fn query(a: &QueryArgs, jobs: usize, command: &str) -> Result<()> {
    let cfg = SearchConfig {
        w: a.search.w,
        k: a.search.k,
        include_self: !a.search.exclude_self,
        batch_size: a.search.batch_size,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    if cfg.batch_size == 0 {
        return Err(usage("--batch-size must be >= 1"));
    }
    let paths: Vec<PathBuf> = a.indexes.iter().chain(&a.ensemble).cloned().collect();
    if command == "ensemble-query" && paths.len() < 2 {
        return Err(usage("ensemble-query needs at least two indexes"));
    }
    check_selection(&a.select)?;
    let scorer_spec = parse_scorer(&a.scorer)?;
    let norm = norm_config(&a.norm)?;

    let manifest = ManifestBuilder::new(command, a, jobs)?
        .input(&a.corpus)
        .inputs(&paths)
        .inputs(&a.select.queries);
    let pool = load_corpus(&a.corpus)?;
    let queries = query_set(&a.select, &pool)?;
    let (indexes, embedders) = load_indexes(&paths)?;
    let retrievers = embedders
        .iter()
        .zip(&indexes)
        .map(|(e, i)| Retriever::new(e, i))
        .collect::<resim::Result<Vec<_>>>()?;
    let scorer = build_scorer(scorer_spec, &a.scorer, &pool)?;
    let cache = if a.scorer.no_token_cache {
        None
    } else {
        Some(TokenCache::build(&pool, &norm)?)
    };
    let mut engine = SearchEngine::new(&pool, &norm, scorer.as_ref());
    if let Some(c) = &cache {
        engine = engine.with_token_cache(c);
    }
    let results = run_queries(&engine, &retrievers, &queries, &cfg, jobs > 1)?;

    let mut out = open_output(a.out.as_deref())?;
    for r in &results {
        write_json_line(&mut out, &without_timing(r)?)?;
    }
    out.flush()?;
    if let Some(path) = &a.report {
        write_pretty(Some(path), &timing_report(&results))?;
    }
    let outputs: Vec<&Path> = a.out.iter().chain(&a.report).map(PathBuf::as_path).collect();
    match outputs.first() {
        Some(artifact) => manifest
            .summary(json!({"queries": results.len()}))
            .write(artifact, &outputs),
        None => Ok(()),
    }
}

fn timing_report(results: &[SearchResult]) -> Value {
    let n = results.len().max(1) as f64;
    let mean = |f: fn(&SearchResult) -> f64| results.iter().map(f).sum::<f64>() / n;
    json!({
        "queries": results.iter().map(|r| json!({"query_id": r.query_id, "timing": r.timing})).collect::<Vec<_>>(),
        "mean": {
            "t_phi": mean(|r| r.timing.t_phi),
            "t_sim": mean(|r| r.timing.t_sim),
            "t_rho": mean(|r| r.timing.t_rho),
        },
    })
}

fn mine(a: &MineArgs, jobs: usize) -> Result<()> {
    let cfg = MiningConfig {
        negatives_per_embedder: a.negatives_per_embedder,
        mining_depth: a.mining_depth,
        seed: a.seed,
    };
    if cfg.mining_depth < cfg.negatives_per_embedder {
        return Err(usage("--mining-depth must be >= --negatives-per-embedder"));
    }
    let manifest = ManifestBuilder::new("mine-triplets", a, jobs)?
        .seed("mining", a.seed)
        .input(&a.corpus)
        .input(&a.anchors)
        .inputs(&a.indexes);
    let pool = load_corpus(&a.corpus)?;
    let anchors = QuerySet::load(&a.anchors)?;
    let indexes: Vec<VectorIndex> = a
        .indexes
        .iter()
        .map(|p| VectorIndex::load(p))
        .collect::<resim::Result<_>>()?;
    let refs: Vec<&VectorIndex> = indexes.iter().collect();
    let outcome = mine_triplets(&pool, &anchors, &refs, &cfg)?;
    write_triplets(&a.out, &outcome.triplets, a.seed, a.mining_depth)?;
    if !outcome.skipped.is_empty() {
        log::warn!("{} anchors have no equivalent function and were skipped", outcome.skipped.len());
    }
    eprintln!("{} triplets from {} anchors", outcome.triplets.len(), anchors.len());
    manifest
        .summary(json!({"triplets": outcome.triplets.len(), "skipped": outcome.skipped}))
        .write(&a.out, &[&a.out])
}

fn train(a: &TrainArgs, jobs: usize) -> Result<()> {
    let cfg = TrainConfig {
        margin: a.margin,
        learning_rate: a.learning_rate,
        epochs: a.epochs,
        seed: a.seed,
        shuffle: !a.no_shuffle,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let norm = norm_config(&a.norm)?;
    let manifest = ManifestBuilder::new("train-scorer", a, jobs)?
        .seed("shuffle", a.seed)
        .input(&a.corpus)
        .input(&a.triplets);
    let pool = load_corpus(&a.corpus)?;
    let triplets = read_triplets(&a.triplets)?;
    let outcome = train_linear_scorer(&triplets, &pool, &cfg, &norm)?;
    outcome.model.save(&a.out)?;
    eprintln!(
        "mean loss {:.6} -> {:.6} over {} triplets",
        outcome.initial_mean_loss,
        outcome.final_mean_loss,
        triplets.len()
    );
    manifest
        .summary(json!({
            "triplets": triplets.len(),
            "initial_mean_loss": outcome.initial_mean_loss,
            "final_mean_loss": outcome.final_mean_loss,
        }))
        .write(&a.out, &[&a.out])
}

fn eval(a: &EvalArgs, jobs: usize) -> Result<()> {
    check_ks(&a.ks)?;
    let manifest = ManifestBuilder::new("eval", a, jobs)?
        .input(&a.run)
        .inputs(&a.baseline);
    let results = read_run(&a.run)?;
    let baseline: Option<MetricReport> = match &a.baseline {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("{}: cannot read", p.display()))?;
            Some(serde_json::from_str(&text).with_context(|| format!("{}: not a metric report", p.display()))?)
        }
        None => None,
    };
    let entries: Vec<EvalEntry> = results
        .iter()
        .map(|r| {
            let mut e = if a.embedding_only {
                EvalEntry::embedding_only(r)
            } else {
                EvalEntry::reranked(r)
            };
            if a.group_by.is_none() {
                e.group = None;
            }
            e
        })
        .collect();
    let report = evaluate_entries(&entries, &a.ks, baseline.as_ref())?;
    if a.table {
        let mut out = open_output(a.out.as_deref())?;
        out.write_all(report.to_table().as_bytes())?;
        out.flush()?;
    } else {
        write_pretty(a.out.as_deref(), &report)?;
    }
    match &a.out {
        Some(path) => manifest.write(path, &[path]),
        None => Ok(()),
    }
}

struct Bench<'a> {
    pool: &'a Pool,
    norm: &'a NormalizeConfig,
    cache: Option<TokenCache>,
    scorer: Box<dyn Scorer>,
}

impl<'a> Bench<'a> {
    fn new(pool: &'a Pool, norm: &'a NormalizeConfig, scorer_args: &ScorerArgs, spec: ScorerSpec) -> Result<Self> {
        Ok(Self {
            pool,
            norm,
            cache: (!scorer_args.no_token_cache)
                .then(|| TokenCache::build(pool, norm))
                .transpose()?,
            scorer: build_scorer(spec, scorer_args, pool)?,
        })
    }

    fn engine(&self) -> SearchEngine<'_> {
        let engine = SearchEngine::new(self.pool, self.norm, self.scorer.as_ref());
        match &self.cache {
            Some(c) => engine.with_token_cache(c),
            None => engine,
        }
    }
}

fn sweep(a: &SweepArgs, jobs: usize) -> Result<()> {
    check_windows(&a.ws, a.k)?;
    check_ks(&a.ks)?;
    check_selection(&a.select)?;
    let spec = parse_scorer(&a.scorer)?;
    let norm = norm_config(&a.norm)?;
    let manifest = ManifestBuilder::new("sweep", a, jobs)?
        .input(&a.corpus)
        .input(&a.index)
        .inputs(&a.select.queries);
    let pool = load_corpus(&a.corpus)?;
    let queries = query_set(&a.select, &pool)?;
    let (indexes, embedders) = load_indexes(std::slice::from_ref(&a.index))?;
    let retriever = Retriever::new(&embedders[0], &indexes[0])?;
    let bench = Bench::new(&pool, &norm, &a.scorer, spec)?;
    let base = SearchConfig::new(a.ws[0], a.k);
    let report = window_sweep(&bench.engine(), retriever, &base, &a.ws, &queries, &a.ks)?;

    let mut quality = serde_json::to_value(&report)?;
    if let Some(map) = quality.as_object_mut() {
        map.remove("t_rho_fit");
        if let Some(Value::Array(rows)) = map.get_mut("rows") {
            for row in rows.iter_mut().filter_map(Value::as_object_mut) {
                row.retain(|k, _| !k.starts_with("mean_t_"));
            }
        }
    }
    write_pretty(a.out.as_deref(), &quality)?;
    if let Some(path) = &a.report {
        write_pretty(Some(path), &timing_rows(&report))?;
    }
    let outputs: Vec<&Path> = a.out.iter().chain(&a.report).map(PathBuf::as_path).collect();
    match outputs.first() {
        Some(artifact) => manifest.write(artifact, &outputs),
        None => Ok(()),
    }
}

fn timing_rows(report: &resim::eval::SweepReport) -> Value {
    let rows: Vec<Value> = report
        .rows
        .iter()
        .map(|r| {
            let overhead = if r.mean_t_rho > 0.0 {
                Some((r.mean_t_phi + r.mean_t_sim) / r.mean_t_rho * 100.0)
            } else {
                None
            };
            json!({
                "w": r.w,
                "mean_t_phi": r.mean_t_phi,
                "mean_t_sim": r.mean_t_sim,
                "mean_t_rho": r.mean_t_rho,
                "overhead_pct": overhead,
            })
        })
        .collect();
    json!({"rows": rows, "t_rho_fit": report.t_rho_fit})
}

fn bench(a: &BenchArgs, jobs: usize) -> Result<()> {
    check_windows(&a.ws, a.k)?;
    if a.limit == 0 {
        return Err(usage("--limit must be >= 1"));
    }
    let spec = parse_scorer(&a.scorer)?;
    let norm = norm_config(&a.norm)?;
    let pool = load_corpus(&a.corpus)?;
    let queries = if a.select.query_ids.is_empty() && a.select.queries.is_none() {
        QuerySet::from_ids(pool.sorted_ids().into_iter().take(a.limit))
    } else {
        let mut q = query_set(&a.select, &pool)?;
        q.entries.truncate(a.limit);
        q
    };
    let (indexes, embedders) = load_indexes(std::slice::from_ref(&a.index))?;
    let retriever = Retriever::new(&embedders[0], &indexes[0])?;
    let bench = Bench::new(&pool, &norm, &a.scorer, spec)?;
    let engine = bench.engine();
    // One untimed pass so the first window size does not pay for cold caches.
    run_queries(&engine, &[retriever], &queries, &SearchConfig::new(a.ws[0], a.k), false)?;
    let report = window_sweep(&engine, retriever, &SearchConfig::new(a.ws[0], a.k), &a.ws, &queries, &[a.k])?;
    log::info!("benchmarked {} queries with {} worker(s)", queries.len(), jobs);
    write_pretty(None, &timing_rows(&report))
}

fn synth(a: &SynthArgs, jobs: usize) -> Result<()> {
    let cfg = SynthConfig {
        classes: a.classes,
        variants_per_class: a.variants,
        mutation_rate: a.mutation_rate,
        seed: a.seed,
        min_instructions: a.min_instructions,
        max_instructions: a.max_instructions,
    };
    let manifest = ManifestBuilder::new("synth", a, jobs)?.seed("synth", a.seed);
    let (pool, queries) = generate_synthetic_corpus(&cfg).map_err(|e| usage(e.to_string()))?;
    pool.write_jsonl(&a.out)?;
    queries.save(&a.queries_out)?;
    eprintln!("{} functions, {} queries", pool.len(), queries.len());
    manifest
        .summary(json!({"functions": pool.len(), "queries": queries.len()}))
        .write(&a.out, &[&a.out, &a.queries_out])
}
