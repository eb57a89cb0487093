use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use pinalite::client::{ingest_snapshot, ClientConfig, HttpClient};
use pinalite::executor::{execute, ExecError, ExecOptions, SimulatedApp};
use pinalite::harness::{bundled_spec, render_table, run_eval, HarnessError, SyntheticAppSpec};
use pinalite::hashing::UserId;
use pinalite::obfuscator::{classify, obfuscate, ObfuscateError, ObfuscationReport, Overrides};
use pinalite::review::{ReviewServer, ReviewSession};
use pinalite::script::{deserialize_script, load_trace, record_from_trace, serialize_script, validate, Finding, Script};
use pinalite::server::{Aggregator, ServerConfig, ServiceError};
use pinalite::ui_model::load_screen;

#[derive(Parser)]
#[command(name = "pinalite", version, about = "Share GUI automation scripts without leaking personal data")]
struct Cli {
    /// Directory holding the client identity.
    #[arg(long, global = true, env = "PINALITE_HOME")]
    home: Option<PathBuf>,
    /// Aggregation server; overrides PINALITE_SERVER_URL and the stored URL.
    #[arg(long, global = true)]
    server: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the aggregation server.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 8470)]
        port: u16,
        #[arg(long, default_value_t = IpAddr::V4(Ipv4Addr::LOCALHOST))]
        host: IpAddr,
    },
    /// Hash and upload every screen file in a directory.
    Ingest {
        #[arg(long)]
        screens: PathBuf,
        #[arg(long)]
        user: Option<String>,
    },
    /// Turn a demonstration trace into a script.
    Record {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify, review and obfuscate a script for sharing.
    Share {
        #[arg(long)]
        script: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON object mapping entry ids to public (true) or personal (false).
        #[arg(long)]
        overrides: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Serve the review endpoint on loopback and wait for confirmation.
        #[arg(long)]
        serve_review: bool,
        #[arg(long, default_value_t = 0)]
        review_port: u16,
    },
    /// Execute a script against a simulated app.
    Run {
        #[arg(long)]
        script: PathBuf,
        #[arg(long)]
        app: PathBuf,
        /// Parameter choice as name=value; repeatable.
        #[arg(long = "param", value_parser = parse_param)]
        params: Vec<(String, String)>,
        /// Where to write the rebuilt script.
        #[arg(long)]
        rebuilt: Option<PathBuf>,
    },
    /// Precision, recall and accuracy on synthetic apps.
    Eval {
        /// Spec file, or the name of a bundled app; repeatable.
        #[arg(long, required = true)]
        spec: Vec<String>,
        #[arg(long, default_value_t = 5)]
        users: usize,
        #[arg(long, default_value_t = 0.5)]
        t: f64,
        #[arg(long)]
        seed: Option<u64>,
        /// Print machine-readable JSON instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Check a script for structural problems.
    Validate {
        #[arg(long)]
        script: PathBuf,
    },
    /// Print the client's anonymous id.
    Id {
        /// Replace it with a fresh one first.
        #[arg(long)]
        reset: bool,
    },
}

fn parse_param(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.to_owned(), v.to_owned()))
        .ok_or_else(|| format!("expected name=value, got `{s}`"))
}

/// Exit codes: 1 validation, 2 server or I/O, 3 leak sweep.
struct Failure {
    code: u8,
    message: String,
}

fn validation(m: impl ToString) -> Failure {
    Failure {
        code: 1,
        message: m.to_string(),
    }
}

fn io(m: impl ToString) -> Failure {
    Failure {
        code: 2,
        message: m.to_string(),
    }
}

impl From<ObfuscateError> for Failure {
    fn from(e: ObfuscateError) -> Self {
        let code = match &e {
            ObfuscateError::Leak { .. } => 3,
            ObfuscateError::Unavailable(_) | ObfuscateError::VerdictCount { .. } => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<ServiceError> for Failure {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Malformed(_) => validation(e),
            _ => io(e),
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Service(_) | HarnessError::Io(_) => io(e),
            HarnessError::Obfuscate(o) => o.into(),
            _ => validation(e),
        }
    }
}

impl From<ExecError> for Failure {
    fn from(e: ExecError) -> Self {
        validation(e)
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| io(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| io(format!("{}: {e}", path.display())))
}

fn load_script(path: &Path) -> Result<Script, Failure> {
    deserialize_script(&read(path)?).map_err(|e| validation(format!("{}: {e}", path.display())))
}

fn print_findings(findings: &[Finding]) {
    for f in findings {
        eprintln!("warning: {f}");
    }
}

struct Env {
    home: PathBuf,
    server: Option<String>,
}

impl Env {
    fn client_config(&self) -> Result<ClientConfig, Failure> {
        ClientConfig::load_or_create(&self.home.join("client.json")).map_err(|e| io(format!("client config: {e}")))
    }

    fn client(&self, config: &ClientConfig) -> Result<HttpClient, Failure> {
        let url = self
            .server
            .clone()
            .or_else(|| config.server_url())
            .ok_or_else(|| io("no aggregation server configured; pass --server or set PINALITE_SERVER_URL"))?;
        Ok(HttpClient::new(&url))
    }
}

fn default_home() -> PathBuf {
    std::env::var_os("HOME")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
        .join(".pinalite")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_target(false).init();
    let env = Env {
        home: cli.home.clone().unwrap_or_else(default_home),
        server: cli.server.clone(),
    };
    match dispatch(cli.command, &env) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(command: Command, env: &Env) -> Result<(), Failure> {
    match command {
        Command::Serve { config, port, host } => serve(&config, SocketAddr::new(host, port)),
        Command::Ingest { screens, user } => ingest(env, &screens, user.as_deref()),
        Command::Record { trace, out } => record(&trace, &out),
        Command::Share {
            script,
            out,
            overrides,
            report,
            serve_review,
            review_port,
        } => share(env, &script, &out, overrides.as_deref(), report.as_deref(), serve_review.then_some(review_port)),
        Command::Run {
            script,
            app,
            params,
            rebuilt,
        } => run(&script, &app, params, rebuilt.as_deref()),
        Command::Eval {
            spec,
            users,
            t,
            seed,
            json,
        } => eval(&spec, users, t, seed, json),
        Command::Validate { script } => {
            let s = load_script(&script)?;
            let findings = validate(&s);
            for f in &findings {
                println!("{f}");
            }
            if findings.is_empty() {
                println!("ok");
                Ok(())
            } else {
                Err(validation(format!("{} findings", findings.len())))
            }
        }
        Command::Id { reset } => {
            let path = env.home.join("client.json");
            let config = if reset {
                ClientConfig::reset(&path)
            } else {
                ClientConfig::load_or_create(&path)
            }
            .map_err(|e| io(format!("client config: {e}")))?;
            println!("{}", config.user_id);
            Ok(())
        }
    }
}

fn serve(config_path: &Path, addr: SocketAddr) -> Result<(), Failure> {
    let config = ServerConfig::load(config_path).map_err(validation)?;
    let agg = Arc::new(Aggregator::open(config).map_err(io)?);
    pinalite::http::run_blocking(agg, addr, |bound| {
        println!("listening on http://{bound}");
        let _ = std::io::stdout().flush();
    })
    .map_err(io)
}

fn ingest(env: &Env, dir: &Path, user: Option<&str>) -> Result<(), Failure> {
    let config = env.client_config()?;
    let user = match user {
        Some(u) => UserId::parse(u).map_err(|e| validation(format!("--user: {e}")))?,
        None => config.user_id.clone(),
    };
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let screens = files
        .iter()
        .map(|p| load_screen(&read(p)?).map_err(|e| validation(format!("{}: {e}", p.display()))))
        .collect::<Result<Vec<_>, _>>()?;
    let client = env.client(&config)?;
    let (mut new, mut duplicate) = (0, 0);
    for s in &screens {
        let ack = ingest_snapshot(&client, &user, &s.graph())?;
        new += ack.new;
        duplicate += ack.duplicate;
    }
    println!("screens {}  new {new}  duplicate {duplicate}", screens.len());
    Ok(())
}

fn record(trace: &Path, out: &Path) -> Result<(), Failure> {
    let t = load_trace(&read(trace)?).map_err(|e| validation(format!("{}: {e}", trace.display())))?;
    let script = record_from_trace(&t).map_err(validation)?;
    let findings = validate(&script);
    if !findings.is_empty() {
        print_findings(&findings);
        return Err(validation("recorded script does not validate"));
    }
    write(out, &serialize_script(&script))?;
    println!("recorded {} blocks, {} parameters", script.block_count(), script.parameters.len());
    Ok(())
}

fn share(
    env: &Env,
    script_path: &Path,
    out: &Path,
    overrides: Option<&Path>,
    report_path: Option<&Path>,
    review_port: Option<u16>,
) -> Result<(), Failure> {
    let script = load_script(script_path)?;
    let findings = validate(&script);
    if !findings.is_empty() {
        print_findings(&findings);
        return Err(validation("script does not validate"));
    }
    let config = env.client_config()?;
    let client = env.client(&config)?;
    let mut report = classify(&script, &client, &config.user_id)?;
    if let Some(path) = overrides {
        let map: Overrides = serde_json::from_str(&read(path)?)
            .map_err(|e| validation(format!("{}: {e}", path.display())))?;
        report.apply_overrides(&map)?;
    }
    let report: ObfuscationReport = match review_port {
        Some(port) => {
            let session = Arc::new(ReviewSession::new(script, report, out));
            let server = ReviewServer::start(session, SocketAddr::new(IpAddr::V4(Ipv4Addr::LOCALHOST), port)).map_err(io)?;
            println!("review at {}", server.url());
            let _ = std::io::stdout().flush();
            let outcome = server.wait_confirmed().map_err(io)?;
            print_findings(&outcome.warnings);
            outcome.report
        }
        None => {
            let shared = obfuscate(&script, &report)?;
            print_findings(&shared.warnings);
            write(out, &serialize_script(&shared.script))?;
            report
        }
    };
    if let Some(path) = report_path {
        write(path, &(serde_json::to_string_pretty(&report).expect("reports serialize") + "\n"))?;
    }
    println!(
        "shared {}  public {}  hidden {}",
        out.display(),
        report.counts.public,
        report.counts.personal
    );
    Ok(())
}

fn run(script: &Path, app: &Path, params: Vec<(String, String)>, rebuilt: Option<&Path>) -> Result<(), Failure> {
    let s = load_script(script)?;
    let app = SimulatedApp::from_json(&read(app)?).map_err(validation)?;
    let opts = ExecOptions {
        params: params.into_iter().collect::<BTreeMap<_, _>>(),
        ..ExecOptions::default()
    };
    let exec = execute(&s, &app, &opts)?;
    print!("{}", exec.trace.to_json_lines());
    if let Some(path) = rebuilt {
        write(path, &serialize_script(&exec.rebuilt))?;
    }
    match exec.trace.failure() {
        None => Ok(()),
        Some(f) => Err(validation(format!("execution halted: {:?}", f.kind))),
    }
}

fn load_spec(name: &str) -> Result<SyntheticAppSpec, Failure> {
    let path = Path::new(name);
    if path.exists() {
        return Ok(SyntheticAppSpec::from_json(&read(path)?)?);
    }
    bundled_spec(name).ok_or_else(|| io(format!("{name}: no such file or bundled app")))
}

fn eval(specs: &[String], users: usize, t: f64, seed: Option<u64>, json: bool) -> Result<(), Failure> {
    if !(t > 0.0 && t < 1.0) {
        return Err(validation(format!("--t must be in (0,1), got {t}")));
    }
    let mut results = Vec::new();
    for name in specs {
        let mut spec = load_spec(name)?;
        if let Some(s) = seed {
            spec.seed = s;
        }
        results.push(run_eval(&spec, users, t)?);
    }
    if json {
        println!("{}", serde_json::to_string_pretty(&results).expect("results serialize"));
    } else {
        print!("{}", render_table(&results));
    }
    Ok(())
}
