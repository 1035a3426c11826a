use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use vtwin_privacy::adversary::TrackRecord;
use vtwin_privacy::allocator::{equal_allocation, optimize_exact};
use vtwin_privacy::config::{load_config, ChangeMode, ConfigError, DemandMode, ScenarioConfig, Scheme};
use vtwin_privacy::ledger::{Chain, Verdict};
use vtwin_privacy::presets;
use vtwin_privacy::report::{self, fmt_num, sha256_hex, ManifestEntry, RunManifest};
use vtwin_privacy::sim::{
    self, allocation_problem, experiment_fig5a, experiment_fig5b, misbehavior_drill, plan_for, resolve_p,
    MisbehaviorReport, SimError, FIG5B_BETAS, FIG5B_GROUPS, TOOL_NAME, TOOL_VERSION,
};

const SEED_ENV: &str = "VTWIN_SEED";

#[derive(Parser)]
#[command(name = "vtwin", version, about = "Pseudonym privacy simulator for vehicular twins")]
struct Cli {
    /// Master seed (overrides the config and the VTWIN_SEED variable).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of consecutive seeds starting at the master seed.
    #[arg(long, global = true)]
    seeds: Option<usize>,
    /// Directory for output files; without it results go to stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<FormatArg>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, global = true, value_enum)]
    scheme: Option<SchemeArg>,
    /// Utility reported in CSV series.
    #[arg(long, global = true, value_enum)]
    demand: Option<DemandArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the event loop on a scenario (file path or `preset:NAME`).
    Simulate { config: String },
    /// Solve the allocation problem only.
    Optimize { config: String },
    /// Replay the configured attackers and the misbehavior drills.
    AttackEval { config: String },
    /// Regenerate one of the comparative experiments.
    Reproduce {
        #[arg(value_enum)]
        figure: Figure,
    },
    /// Check a chain export written by `simulate`.
    VerifyChain { file: PathBuf },
    /// List bundled scenarios, or print one.
    Presets { name: Option<String> },
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    JsonLines,
    Table,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Sync,
    Async,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    #[value(name = "on_demand")]
    OnDemand,
    Equal,
}

#[derive(Clone, Copy, ValueEnum)]
enum DemandArg {
    Realized,
    Expected,
}

#[derive(Clone, Copy, ValueEnum)]
enum Figure {
    Fig5a,
    Fig5b,
}

enum Failure {
    Config(String),
    Runtime(String),
    Chain(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
            Failure::Chain(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Runtime(m) | Failure::Chain(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(c) => Failure::Config(c.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Simulate { config } => simulate(cli, config),
        Command::Optimize { config } => optimize(cli, config),
        Command::AttackEval { config } => attack_eval(cli, config),
        Command::Reproduce { figure } => reproduce(cli, *figure),
        Command::VerifyChain { file } => verify_chain(file),
        Command::Presets { name } => list_presets(name.as_deref()),
    }
}

fn load(source: &str) -> Result<ScenarioConfig, Failure> {
    match source.strip_prefix("preset:") {
        Some(name) => Ok(presets::preset(name)?),
        None => Ok(load_config(Path::new(source))?),
    }
}

/// Resolves the master seed: flag, then environment, then config.
fn master_seed(cli: &Cli, config_seed: u64) -> Result<(u64, &'static str), Failure> {
    if let Some(s) = cli.seed {
        return Ok((s, "flag"));
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(|s| (s, "env"))
            .map_err(|_| Failure::Config(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok((config_seed, "config")),
    }
}

fn seed_list(cli: &Cli, base: u64, default_count: usize) -> Vec<u64> {
    let n = cli.seeds.unwrap_or(default_count).max(1);
    (0..n as u64).map(|k| base.wrapping_add(k)).collect()
}

fn apply_overrides(cli: &Cli, config: &mut ScenarioConfig) {
    if let Some(m) = cli.mode {
        config.mode = match m {
            ModeArg::Sync => ChangeMode::Sync,
            ModeArg::Async => ChangeMode::Async,
        };
    }
    if let Some(s) = cli.scheme {
        config.scheme = match s {
            SchemeArg::OnDemand => Scheme::OnDemand,
            SchemeArg::Equal => Scheme::Equal,
        };
    }
    if let Some(d) = cli.demand {
        config.demand_mode = demand_mode(d);
    }
}

fn demand_mode(d: DemandArg) -> DemandMode {
    match d {
        DemandArg::Realized => DemandMode::Realized,
        DemandArg::Expected => DemandMode::Expected,
    }
}

fn format_of(cli: &Cli, default: FormatArg) -> FormatArg {
    cli.format.unwrap_or(default)
}

/// Collects output files and writes them, plus the manifest, in one go.
struct Outputs {
    dir: Option<PathBuf>,
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    fn new(cli: &Cli) -> Self {
        Self {
            dir: cli.out.clone(),
            files: Vec::new(),
        }
    }

    fn add(&mut self, name: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.into(), bytes.into()));
    }

    /// The first file added is the primary report hashed into the manifest.
    fn finish(self, command: &str, config: &ScenarioConfig, seeds: &[u64], seed_source: &str) -> Result<(), Failure> {
        let Some(dir) = self.dir else {
            return Ok(());
        };
        fs::create_dir_all(&dir)?;
        let mut outputs = Vec::new();
        for (name, bytes) in &self.files {
            fs::write(dir.join(name), bytes)?;
            outputs.push(ManifestEntry {
                path: name.clone(),
                sha256: sha256_hex(bytes),
            });
        }
        let manifest = RunManifest {
            tool: TOOL_NAME.into(),
            version: TOOL_VERSION.into(),
            command: command.into(),
            config_echo: config.to_toml(),
            seeds: seeds.to_vec(),
            seed_source: seed_source.into(),
            report_sha256: outputs.first().map(|o| o.sha256.clone()).unwrap_or_default(),
            outputs,
        };
        fs::write(dir.join("manifest.json"), manifest.to_json())?;
        eprintln!("wrote {} files to {}", self.files.len() + 1, dir.display());
        Ok(())
    }
}

fn simulate(cli: &Cli, source: &str) -> Result<(), Failure> {
    let mut config = load(source)?;
    apply_overrides(cli, &mut config);
    let (base, source) = master_seed(cli, config.seed)?;
    let seeds = seed_list(cli, base, 1);
    let format = format_of(cli, FormatArg::Table);

    let mut primary = String::new();
    let mut timelines = String::new();
    let mut chains = Vec::new();
    for (k, &s) in seeds.iter().enumerate() {
        let mut c = config.clone();
        c.seed = s;
        let out = sim::simulate(&c)?;
        match format {
            FormatArg::JsonLines => primary.push_str(&report::report_jsonl(&out.report)),
            FormatArg::Table => primary.push_str(&report::report_table(&out.report)),
            FormatArg::Csv => {
                let csv = report::vmus_csv(&out.report);
                primary.push_str(if k == 0 {
                    &csv
                } else {
                    csv.split_once('\n').map_or("", |x| x.1)
                });
            }
        }
        let tl = report::timelines_csv(&out.report);
        timelines.push_str(if k == 0 {
            &tl
        } else {
            tl.split_once('\n').map_or("", |x| x.1)
        });
        chains.push((s, out.chain.to_bytes()));
    }

    let mut outputs = Outputs::new(cli);
    if outputs.dir.is_none() {
        print!("{primary}");
        return Ok(());
    }
    let name = match format {
        FormatArg::JsonLines => "report.jsonl",
        FormatArg::Table => "report.txt",
        FormatArg::Csv => "vmus.csv",
    };
    outputs.add(name, primary);
    outputs.add("timelines.csv", timelines);
    let single = chains.len() == 1;
    for (s, bytes) in chains {
        let file = if single {
            "chain.bin".to_string()
        } else {
            format!("chain-{s}.bin")
        };
        outputs.add(file, bytes);
    }
    config.seed = base;
    outputs.finish("simulate", &config, &seeds, source)
}

#[derive(Serialize)]
struct OptimizeRow {
    vmu_index: usize,
    frequency: f64,
    p: f64,
    rate: f64,
    on_demand: u64,
    exact: u64,
    equal: u64,
    expected_on_demand: f64,
    expected_exact: f64,
    expected_equal: f64,
}

fn optimize(cli: &Cli, source: &str) -> Result<(), Failure> {
    let mut config = load(source)?;
    apply_overrides(cli, &mut config);
    let (seed, source) = master_seed(cli, config.seed)?;
    config.seed = seed;
    config.validate()?;
    let ps = resolve_p(&config);
    let (problem, _) = allocation_problem(&config, &ps)?;
    let on = plan_for(&problem, &config, Scheme::OnDemand)?;
    let exact = optimize_exact(&problem);
    let equal = equal_allocation(&problem);
    let curves = problem.curves();
    let rows: Vec<OptimizeRow> = (0..problem.len())
        .map(|i| OptimizeRow {
            vmu_index: i,
            frequency: config.vmus[i].frequency,
            p: ps[i],
            rate: problem.vmus()[i].model.rate(),
            on_demand: on.r[i],
            exact: exact.r[i],
            equal: equal.r[i],
            expected_on_demand: curves[i].value(on.r[i]),
            expected_exact: curves[i].value(exact.r[i]),
            expected_equal: curves[i].value(equal.r[i]),
        })
        .collect();

    let body = match format_of(cli, FormatArg::Table) {
        FormatArg::JsonLines => rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("row serializes") + "\n")
            .collect::<String>(),
        FormatArg::Csv => {
            let mut s = String::from(
                "vmu_index,frequency,p,rate,on_demand,exact,equal,expected_on_demand,expected_exact,expected_equal\n",
            );
            for r in &rows {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{},{}",
                    r.vmu_index,
                    fmt_num(r.frequency),
                    fmt_num(r.p),
                    fmt_num(r.rate),
                    r.on_demand,
                    r.exact,
                    r.equal,
                    fmt_num(r.expected_on_demand),
                    fmt_num(r.expected_exact),
                    fmt_num(r.expected_equal)
                );
            }
            s
        }
        FormatArg::Table => {
            let mut s = format!(
                "budget {}  solver {:?}  seed {}\n",
                problem.budget(),
                config.solver,
                seed
            );
            let _ = writeln!(
                s,
                "{:>3} {:>6} {:>8} {:>8} {:>9} {:>6} {:>6} {:>12} {:>12}",
                "vmu", "freq", "p", "rate", "on_demand", "exact", "equal", "E[U] ours", "E[U] equal"
            );
            for r in &rows {
                let _ = writeln!(
                    s,
                    "{:>3} {:>6} {:>8} {:>8} {:>9} {:>6} {:>6} {:>12} {:>12}",
                    r.vmu_index,
                    fmt_num(r.frequency),
                    fmt_num(r.p),
                    fmt_num(r.rate),
                    r.on_demand,
                    r.exact,
                    r.equal,
                    fmt_num(r.expected_on_demand),
                    fmt_num(r.expected_equal)
                );
            }
            let _ = writeln!(
                s,
                "total E[U]: on_demand {}  exact {}  equal {}",
                fmt_num(problem.objective(&on)),
                fmt_num(problem.objective(&exact)),
                fmt_num(problem.objective(&equal))
            );
            s
        }
    };
    let mut outputs = Outputs::new(cli);
    if outputs.dir.is_none() {
        print!("{body}");
        return Ok(());
    }
    outputs.add("allocation.txt", body);
    outputs.finish("optimize", &config, &[seed], source)
}

#[derive(Serialize)]
struct AttackEval {
    seed: u64,
    mode: ChangeMode,
    attackers: Vec<AttackerEval>,
    misbehavior: MisbehaviorReport,
}

#[derive(Serialize)]
struct AttackerEval {
    name: String,
    mean_tracked_fraction: f64,
    targets: Vec<TrackRecord>,
}

fn attack_eval(cli: &Cli, source: &str) -> Result<(), Failure> {
    let mut config = load(source)?;
    apply_overrides(cli, &mut config);
    let (seed, source) = master_seed(cli, config.seed)?;
    config.seed = seed;
    let mut out = sim::simulate(&config)?;
    let cfg = out.report.config.clone();
    let attackers: Vec<AttackerEval> = cfg
        .attackers
        .iter()
        .enumerate()
        .map(|(a, att)| {
            let s = vtwin_privacy::seed::derive(seed, &[vtwin_privacy::seed::stream::ATTACKER, a as u64]);
            let targets: Vec<TrackRecord> = (0..cfg.vmus.len())
                .map(|t| vtwin_privacy::adversary::tracking_fraction(&out.trace, t, att, s))
                .collect();
            let mean = targets.iter().map(|t| t.tracked_fraction).sum::<f64>() / targets.len().max(1) as f64;
            AttackerEval {
                name: att.name.clone(),
                mean_tracked_fraction: mean,
                targets,
            }
        })
        .collect();
    let misbehavior = misbehavior_drill(&mut out.system, cfg.period());
    let eval = AttackEval {
        seed,
        mode: cfg.mode,
        attackers,
        misbehavior,
    };

    let body = match format_of(cli, FormatArg::Table) {
        FormatArg::JsonLines => serde_json::to_string(&eval).expect("serializes") + "\n",
        FormatArg::Csv => {
            let mut s = String::from("attacker,target,tracked_fraction,boundaries,links\n");
            for a in &eval.attackers {
                for t in &a.targets {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{}",
                        a.name,
                        t.target,
                        fmt_num(t.tracked_fraction),
                        t.boundaries.len(),
                        t.links
                    );
                }
            }
            s
        }
        FormatArg::Table => {
            let mut s = format!("seed {}  mode {:?}\n", seed, eval.mode);
            for a in &eval.attackers {
                let fr: Vec<String> = a.targets.iter().map(|t| fmt_num(t.tracked_fraction)).collect();
                let _ = writeln!(
                    s,
                    "attacker {:<10} mean {}  per target [{}]",
                    a.name,
                    fmt_num(a.mean_tracked_fraction),
                    fr.join(", ")
                );
            }
            let m = &eval.misbehavior;
            let _ = writeln!(
                s,
                "data injection: {}/{} accepted; impersonation: {}/{} accepted",
                m.injection_successes, m.injection_attempts, m.impersonation_successes, m.impersonation_attempts
            );
            s
        }
    };
    let mut outputs = Outputs::new(cli);
    if outputs.dir.is_none() {
        print!("{body}");
        return Ok(());
    }
    outputs.add("attack.txt", body);
    outputs.finish("attack-eval", &config, &[seed], source)
}

fn reproduce(cli: &Cli, figure: Figure) -> Result<(), Failure> {
    let (name, default_seeds) = match figure {
        Figure::Fig5a => ("paper_fig5a", 30),
        Figure::Fig5b => ("paper_fig5b", 10),
    };
    let mut base = presets::preset(name)?;
    apply_overrides(cli, &mut base);
    let (seed0, source) = master_seed(cli, base.seed)?;
    let seeds = seed_list(cli, seed0, default_seeds);
    let mode = base.demand_mode;
    let format = format_of(cli, FormatArg::Table);
    let (text, csv, json, file) = match figure {
        Figure::Fig5a => {
            let t = experiment_fig5a(&base, &seeds)?;
            let json = t
                .seeds
                .iter()
                .map(|s| serde_json::to_string(s).expect("serializes") + "\n")
                .collect::<String>();
            (report::fig5a_text(&t), report::fig5a_csv(&t, mode), json, "fig5a")
        }
        Figure::Fig5b => {
            let groups: Vec<Vec<f64>> = FIG5B_GROUPS.iter().map(|g| g.to_vec()).collect();
            let t = experiment_fig5b(&base, &groups, &FIG5B_BETAS, &seeds)?;
            let json = t
                .rows
                .iter()
                .map(|r| serde_json::to_string(r).expect("serializes") + "\n")
                .collect::<String>();
            (report::fig5b_text(&t), report::fig5b_csv(&t, mode), json, "fig5b")
        }
    };
    let body = match format {
        FormatArg::Table => text.clone(),
        FormatArg::Csv => csv.clone(),
        FormatArg::JsonLines => json.clone(),
    };
    let mut outputs = Outputs::new(cli);
    if outputs.dir.is_none() {
        print!("{body}");
        return Ok(());
    }
    print!("{text}");
    outputs.add(format!("{file}.csv"), csv);
    outputs.add(format!("{file}.txt"), text);
    outputs.add(format!("{file}.jsonl"), json);
    base.seed = seed0;
    outputs.finish(&format!("reproduce {file}"), &base, &seeds, source)
}

fn verify_chain(file: &Path) -> Result<(), Failure> {
    let bytes = fs::read(file).map_err(|e| Failure::Runtime(format!("cannot read {}: {e}", file.display())))?;
    let chain = Chain::from_bytes(&bytes).map_err(|e| Failure::Chain(format!("malformed chain: {e}")))?;
    match chain.verify() {
        Verdict::Ok => {
            println!("ok: {} blocks, head {}", chain.len(), chain.head().to_hex());
            Ok(())
        }
        Verdict::Invalid { index } => Err(Failure::Chain(format!("chain invalid at block {index}"))),
    }
}

fn list_presets(name: Option<&str>) -> Result<(), Failure> {
    match name {
        Some(n) => {
            let text = presets::preset_text(n).ok_or_else(|| Failure::Config(format!("unknown preset `{n}`")))?;
            print!("{text}");
        }
        None => {
            for n in presets::names() {
                println!("{n}");
            }
        }
    }
    Ok(())
}
