use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use adcost_core::cost::{
    cohort_stats, extrapolate_arpu, nearest_rank, write_outputs, TimeShiftCoefficient, TimeWindow, UserCostReport,
    PERCENTILES,
};
use adcost_core::features::{FeatureExtractor, FeatureGroup, FeatureVector, GeoTable, IabMap, ReferenceData};
use adcost_core::ingest::{Blacklist, Ingestor, LogFormat};
use adcost_core::model::{
    cross_validate, export_model, fit_row_binning, holdout_eval, import_model, select_features, ForestMode,
    ForestParams, PriceEstimator, PriceModel, SelectionConfig, TrainConfig, TrainingRow,
};
use adcost_core::money::MicroCpm;
use adcost_core::nurl::{PriceValue, RuleSet};
use adcost_core::pipeline::{analyze, AnalyzeOptions, StreamingAnalyzer};
use adcost_core::planner::{default_dimensions, plan, SetupStrategy};
use adcost_core::sim::simulate;
use adcost_service::{AppState, Contribution, ContributionStore, ModelRegistry};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::{parse_time, Config};
use crate::{
    AnalyzeArgs, Cli, CliError, Command, EvaluateArgs, ForestArgs, InputFormat, PlanArgs, PublishArgs, ReferenceArgs,
    ReportArgs, RowsArgs, SelectArgs, ServeArgs, SimulateArgs, StrategyArg, TrainArgs,
};

const DEFAULT_LISTEN: &str = "127.0.0.1:8080";
const DEFAULT_MODELS_DIR: &str = "models";
const DEFAULT_CONTRIBUTIONS: &str = "contributions.jsonl";

fn data<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = Config::load(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&cfg, a),
        Command::Analyze(a) => cmd_analyze(&cfg, a),
        Command::Train(a) => cmd_train(&cfg, a),
        Command::Evaluate(a) => cmd_evaluate(&cfg, a),
        Command::Select(a) => cmd_select(&cfg, a),
        Command::Plan(a) => cmd_plan(&cfg, a),
        Command::Report(a) => cmd_report(&cfg, a),
        Command::Publish(a) => cmd_publish(&cfg, a),
        Command::Serve(a) => cmd_serve(&cfg, a),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(data)?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(data)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn stdout_error(e: std::io::Error) -> Result<(), CliError> {
    match e.kind() {
        std::io::ErrorKind::BrokenPipe => Ok(()),
        _ => Err(data(e)),
    }
}

fn print_json(value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(data)?;
    writeln!(std::io::stdout().lock(), "{text}").or_else(stdout_error)
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let f = std::fs::File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(data)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

fn existing(flag: Option<PathBuf>, cfg: &Option<PathBuf>) -> Result<Option<PathBuf>, CliError> {
    match flag.or_else(|| cfg.clone()) {
        Some(p) if !p.is_file() => Err(CliError::Config(format!("missing file {}", p.display()))),
        other => Ok(other),
    }
}

fn reference_data(cfg: &Config, a: ReferenceArgs) -> Result<ReferenceData, CliError> {
    let mut refs = ReferenceData::builtin();
    let conf = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
    if let Some(p) = existing(a.blacklist, &cfg.paths.blacklist)? {
        refs.blacklist.extend(&Blacklist::from_csv_path(&p).map_err(|e| conf(&e))?).map_err(|e| conf(&e))?;
    }
    if let Some(p) = existing(a.geo, &cfg.paths.geo)? {
        refs.geo = GeoTable::from_csv_path(&p).map_err(|e| conf(&e))?;
    }
    if let Some(p) = existing(a.iab_map, &cfg.paths.iab_map)? {
        refs.iab = IabMap::from_csv_path(&p).map_err(|e| conf(&e))?;
    }
    if let Some(p) = existing(a.macro_rules, &cfg.paths.macro_rules)? {
        refs.rules = RuleSet::from_path(&p).map_err(|e| conf(&e))?;
    }
    Ok(refs)
}

fn cmd_simulate(cfg: &Config, a: SimulateArgs) -> Result<(), CliError> {
    let mut sim = cfg.sim.clone().unwrap_or_default();
    if let Some(s) = a.seed {
        sim.seed = s;
    }
    if let Some(u) = a.users {
        sim.n_users = u;
    }
    if let Some(d) = a.days {
        sim.days = d;
    }
    if let Some(s) = a.sigma {
        sim.price_law.sigma = s;
    }
    sim.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let out = simulate(&sim).map_err(data)?;
    out.write_to(&a.out).map_err(data)?;
    eprintln!(
        "simulated {} users: {} requests, {} impressions, {} sealed",
        sim.n_users,
        out.records.len(),
        out.auctions.len(),
        out.ledger.entries.len()
    );
    Ok(())
}

fn window(cfg: &Config, start: Option<String>, end: Option<String>) -> Result<TimeWindow, CliError> {
    let start = start.or_else(|| cfg.window.start.clone()).map(|s| parse_time(&s)).transpose()?;
    let end = end.or_else(|| cfg.window.end.clone()).map(|s| parse_time(&s)).transpose()?;
    let w = TimeWindow { start_ms: start.unwrap_or(i64::MIN), end_ms: end.unwrap_or(i64::MAX) };
    if w.start_ms > w.end_ms {
        return Err(CliError::Config("window start after end".into()));
    }
    Ok(w)
}

fn load_model(path: &Path) -> Result<PriceModel, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    import_model(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn cmd_analyze(cfg: &Config, a: AnalyzeArgs) -> Result<(), CliError> {
    if a.input.is_empty() && !a.stdin {
        return Err(CliError::Config("give --input files or --stdin".into()));
    }
    if a.out.is_none() && !a.stdin {
        return Err(CliError::Config("--out is required unless --stdin".into()));
    }
    let refs = reference_data(cfg, a.refs)?;
    let w = window(cfg, a.start, a.end)?;
    let time_shift = a
        .time_shift
        .or(cfg.time_shift)
        .map(TimeShiftCoefficient::from_ratio)
        .transpose()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let opts = AnalyzeOptions {
        window: w,
        time_shift,
        shift_encrypted: a.shift_encrypted || cfg.shift_encrypted.unwrap_or(false),
    };
    let model = existing(a.model, &cfg.paths.model)?.map(|p| load_model(&p)).transpose()?;
    let extractor = FeatureExtractor::new(refs);
    let ingest_window = (w != TimeWindow::ALL).then_some((w.start_ms, w.end_ms));
    let mut ingestor = Ingestor::new(ingest_window);

    let analysis = if a.stdin {
        let format = match a.format {
            InputFormat::Jsonl => LogFormat::JsonLines,
            InputFormat::Csv => LogFormat::Csv,
        };
        let mut streaming = StreamingAnalyzer::new(&extractor, model.as_ref().map(|m| m as &dyn PriceEstimator), opts);
        let stdout = std::io::stdout();
        let mut out = stdout.lock();
        let mut failure = None;
        let mut closed = false;
        ingestor
            .ingest_reader(std::io::stdin().lock(), format, |record| {
                if failure.is_some() {
                    return;
                }
                let line = match streaming.push(&record) {
                    Ok(Some(t)) => serde_json::to_string(&t).map_err(data),
                    Ok(None) => return,
                    Err(e) => Err(data(e)),
                };
                let written = line.and_then(|l| {
                    if closed {
                        return Ok(());
                    }
                    match writeln!(out, "{l}").and_then(|_| out.flush()) {
                        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {
                            closed = true;
                            Ok(())
                        }
                        other => other.map_err(data),
                    }
                });
                if let Err(e) = written {
                    failure = Some(e);
                }
            })
            .map_err(data)?;
        if let Some(e) = failure {
            return Err(e);
        }
        streaming.finish()
    } else {
        let mut records = Vec::new();
        for p in &a.input {
            ingestor
                .ingest_path(p, |r| records.push(r))
                .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        }
        analyze(records, &extractor, model.as_ref().map(|m| m as &(dyn PriceEstimator + Sync)), &opts).map_err(data)?
    };
    if let Some(dir) = &a.out {
        write_outputs(dir, &analysis.reports, &analysis.summary).map_err(data)?;
        let stats = serde_json::json!({ "ingest": ingestor.stats, "analysis": analysis.stats });
        write_json(&dir.join("analysis_stats.json"), &stats)?;
    }
    eprintln!(
        "{} users, {} notifications ({} cleartext, {} encrypted), {} skipped lines",
        analysis.stats.users,
        analysis.stats.notifications,
        analysis.stats.cleartext,
        analysis.stats.encrypted,
        ingestor.stats.skipped
    );
    Ok(())
}

fn load_rows(a: &RowsArgs) -> Result<Vec<TrainingRow>, CliError> {
    let rows = if let Some(p) = &a.contributions {
        let contributions: Vec<Contribution> = read_jsonl(p)?;
        contributions
            .into_iter()
            .filter_map(|c| match c.price {
                PriceValue::Cleartext { cpm, .. } => {
                    Some(TrainingRow { features: FeatureVector::from(&c.features), cpm })
                }
                PriceValue::Encrypted { .. } => None,
            })
            .collect()
    } else if let Some(p) = &a.input {
        read_jsonl(p)?
    } else {
        return Err(CliError::Config("give --input or --contributions".into()));
    };
    if rows.is_empty() {
        return Err(CliError::Data("no training rows".into()));
    }
    Ok(rows)
}

fn parse_groups(s: &str) -> Result<BTreeSet<FeatureGroup>, CliError> {
    s.chars()
        .filter(|c| !c.is_whitespace() && *c != ',')
        .map(|c| {
            FeatureGroup::from_letter(c.to_ascii_uppercase())
                .ok_or_else(|| CliError::Config(format!("unknown feature group {c:?}")))
        })
        .collect()
}

fn train_config(cfg: &Config, a: &ForestArgs) -> Result<TrainConfig, CliError> {
    let f = &cfg.forest;
    let d = ForestParams::default();
    let groups = a.groups.clone().or_else(|| f.groups.clone()).map(|g| parse_groups(&g)).transpose()?;
    let regression = a.regression || f.regression.unwrap_or(false);
    Ok(TrainConfig {
        classes: a.classes.or(cfg.classes).unwrap_or(4),
        params: ForestParams {
            n_trees: a.trees.or(f.n_trees).unwrap_or(d.n_trees),
            max_depth: a.max_depth.or(f.max_depth).or(d.max_depth),
            min_leaf: a.min_leaf.or(f.min_leaf).unwrap_or(d.min_leaf),
            features_per_split: a.features_per_split.or(f.features_per_split).or(d.features_per_split),
        },
        mode: if regression { ForestMode::Regression } else { ForestMode::Classification },
        groups,
        variance_filter: !a.no_variance_filter && f.variance_filter.unwrap_or(true),
        seed: a.seed.or(f.seed).unwrap_or(0),
    })
}

fn cmd_train(cfg: &Config, a: TrainArgs) -> Result<(), CliError> {
    let tc = train_config(cfg, &a.forest)?;
    let rows = load_rows(&a.rows)?;
    let model = PriceModel::train(&rows, &tc).map_err(data)?;
    std::fs::create_dir_all(&a.out).map_err(data)?;
    std::fs::write(a.out.join("model.json"), export_model(&model)).map_err(data)?;
    print_json(&model.training_meta)
}

fn cmd_evaluate(cfg: &Config, a: EvaluateArgs) -> Result<(), CliError> {
    let tc = train_config(cfg, &a.forest)?;
    let mut rows = load_rows(&a.rows)?;
    if a.permute_prices {
        let mut prices: Vec<MicroCpm> = rows.iter().map(|r| r.cpm).collect();
        prices.shuffle(&mut ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed));
        for (r, p) in rows.iter_mut().zip(prices) {
            r.cpm = p;
        }
    }
    let metrics = match a.holdout {
        Some(share) => holdout_eval(&rows, &tc, share),
        None => cross_validate(&rows, &tc, a.folds, a.runs),
    }
    .map_err(data)?;
    if let Some(dir) = &a.out {
        write_json(&dir.join("eval.json"), &metrics)?;
    }
    print_json(&metrics)
}

fn cmd_select(cfg: &Config, a: SelectArgs) -> Result<(), CliError> {
    let rows = load_rows(&a.rows)?;
    let classes = a.classes.or(cfg.classes).unwrap_or(4);
    let (binning, _) = fit_row_binning(&rows, classes).map_err(data)?;
    let labels: Vec<usize> = rows.iter().map(|r| binning.class_of(r.cpm)).collect();
    let features: Vec<FeatureVector> = rows.into_iter().map(|r| r.features).collect();
    let mut sc = SelectionConfig::default();
    if let Some(f) = a.folds {
        sc.folds = f;
    }
    if let Some(t) = a.trees.or(cfg.forest.n_trees) {
        sc.params.n_trees = t;
    }
    if let Some(m) = a.max_rows {
        sc.max_rows = m;
    }
    sc.exhaustive = a.exhaustive;
    sc.seed = a.seed.or(cfg.forest.seed).unwrap_or(0);
    let report = select_features(&features, &labels, binning.k(), &sc).map_err(data)?;
    if let Some(dir) = &a.out {
        write_json(&dir.join("selection.json"), &report)?;
    }
    print_json(&report)
}

fn cmd_plan(cfg: &Config, a: PlanArgs) -> Result<(), CliError> {
    let c = &cfg.campaign;
    let strategy = if a.paper_144 {
        SetupStrategy::Paper144
    } else {
        match a.strategy {
            Some(StrategyArg::FullCross) => SetupStrategy::FullCross,
            Some(StrategyArg::Paper144) => SetupStrategy::Paper144,
            None => c.strategy.unwrap_or(SetupStrategy::FullCross),
        }
    };
    let dims = c.dimensions.clone().unwrap_or_else(default_dimensions);
    let mut params = c.sample_size.clone().unwrap_or_default();
    if let Some(v) = a.campaign_std {
        params.campaign_std = v;
    }
    if let Some(v) = a.impression_std {
        params.impression_std = v;
    }
    if let Some(v) = a.impression_margin {
        params.impression_margin = v;
    }
    if let Some(v) = a.alpha {
        params.alpha = v;
    }
    let max_bid = a.max_bid.or(c.max_bid_cpm).unwrap_or(1.0);
    let p = plan(&dims, strategy, &params, max_bid).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(dir) = &a.out {
        write_json(&dir.join("plan.json"), &p)?;
    }
    print_json(&p)
}

#[derive(Debug, Serialize)]
struct ArpuRow {
    percentile: String,
    total_cpm: f64,
    annual_cpm: f64,
    arpu_usd: f64,
}

fn cmd_report(cfg: &Config, a: ReportArgs) -> Result<(), CliError> {
    let reports: Vec<UserCostReport> = read_jsonl(&a.reports)?;
    if reports.is_empty() {
        return Err(CliError::Data("no user reports".into()));
    }
    let days = match a.days {
        Some(d) if d > 0.0 => d,
        Some(d) => return Err(CliError::Config(format!("--days {d} must be positive"))),
        None => reports[0]
            .window
            .days()
            .filter(|d| *d > 0.0)
            .ok_or_else(|| CliError::Config("reports carry no time window; pass --days".into()))?,
    };
    let factors = cfg.arpu.unwrap_or_default();
    let summary = cohort_stats(&reports);
    write_outputs(&a.out, &reports, &summary).map_err(data)?;
    let mut totals: Vec<f64> = reports.iter().map(|r| r.total_cpm.as_cpm_f64()).collect();
    totals.sort_by(f64::total_cmp);
    let scale = 365.0 / days;
    let mut rows = Vec::new();
    let mean = totals.iter().sum::<f64>() / totals.len() as f64;
    let stats = PERCENTILES
        .iter()
        .map(|p| (format!("p{p}"), nearest_rank(&totals, f64::from(*p)).unwrap_or(0.0)))
        .chain(std::iter::once(("mean".to_string(), mean)));
    for (name, total) in stats {
        let annual = total * scale;
        rows.push(ArpuRow {
            percentile: name,
            total_cpm: total,
            annual_cpm: annual,
            arpu_usd: extrapolate_arpu(annual, &factors).map_err(|e| CliError::Config(e.to_string()))?,
        });
    }
    let mut csv = String::from("stat,total_cpm,annual_cpm,arpu_usd\n");
    for r in &rows {
        csv.push_str(&format!("{},{:.6},{:.6},{:.6}\n", r.percentile, r.total_cpm, r.annual_cpm, r.arpu_usd));
    }
    std::fs::write(a.out.join("arpu.csv"), csv).map_err(data)?;
    print_json(&serde_json::json!({ "days": days, "factors": factors, "arpu": rows }))
}

fn models_dir(cfg: &Config, flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| cfg.service.models_dir.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_MODELS_DIR))
}

fn cmd_publish(cfg: &Config, a: PublishArgs) -> Result<(), CliError> {
    let bytes = std::fs::read(&a.model).map_err(|e| CliError::Data(format!("{}: {e}", a.model.display())))?;
    let registry = ModelRegistry::open(models_dir(cfg, a.models)).map_err(data)?;
    let manifest = registry.publish(&bytes, chrono::Utc::now()).map_err(data)?;
    print_json(&manifest)
}

fn cmd_serve(cfg: &Config, a: ServeArgs) -> Result<(), CliError> {
    let listen = a.listen.or_else(|| cfg.service.listen.clone()).unwrap_or_else(|| DEFAULT_LISTEN.to_string());
    let store_path = a
        .contributions
        .or_else(|| cfg.service.contributions.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_CONTRIBUTIONS));
    let registry = Arc::new(ModelRegistry::open(models_dir(cfg, a.models)).map_err(data)?);
    let rt = tokio::runtime::Runtime::new().map_err(data)?;
    rt.block_on(async move {
        let store = ContributionStore::open(&store_path).await.map_err(data)?;
        let listener = tokio::net::TcpListener::bind(&listen)
            .await
            .map_err(|e| CliError::Config(format!("cannot listen on {listen}: {e}")))?;
        eprintln!("serving on {}", listener.local_addr().map_err(data)?);
        adcost_service::serve(listener, AppState { registry, store }).await.map_err(data)
    })
}
